import numpy as np
import pytest

from atisr import numerics as nx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Central differences at h=1e-5 carry ~1e-10 absolute noise in float64, so the
# relative error denominator is floored at this magnitude.
GRAD_FLOOR = 1e-4


def grad_check(loss_fn, tensors, rng, n_coords=50, h=1e-5):
    """Compare tape gradients with central differences on random coordinates.

    Returns the worst relative error over the sampled coordinates.
    """
    with nx.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    def f():
        with nx.no_grad():
            return loss_fn().item()

    coords = [(k, idx) for k, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
    picks = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    worst = 0.0
    for p in picks:
        k, idx = coords[p]
        num = nx.numerical_grad(f, tensors[k].data, idx, h)
        a = analytic[k][idx]
        denom = max(abs(a), abs(num), GRAD_FLOOR)
        worst = max(worst, abs(a - num) / denom)
    return worst


TINY = dict(proj_dim=24, enc_hidden=24, dec_hidden=32, emb_dim=12, att_dim=16)


@pytest.fixture(scope="session")
def one_utterance():
    """A short synthetic utterance from the default templates."""
    from dataclasses import replace

    from atisr.corpus import SyntheticSpec, generate_synthetic, synthetic_vocabulary

    spec = replace(SyntheticSpec(), min_chars=6, max_chars=6, n_train=1, n_dev=0, n_test=0,
                   min_frames_per_char=8, max_frames_per_char=12)
    return generate_synthetic(spec)[0][0], synthetic_vocabulary(spec)


@pytest.fixture(scope="session")
def memorized(one_utterance):
    """A teacher overfit on ``one_utterance`` (500 single-example steps)."""
    from atisr.network import ArchConfig
    from atisr.seq2seq import TrainConfig, train_teacher

    u, vocab = one_utterance
    arch = ArchConfig(feat_dim=u.features.shape[1], vocab_size=len(vocab), **TINY)
    model, tlog = train_teacher([u], [u], vocab, arch, TrainConfig(epochs=500, batch_size=1, lr=5e-3))
    return model, tlog


@pytest.fixture(scope="session")
def fitted_teacher():
    """A tiny teacher fit to 120 short utterances, enough to need its attention.

    A single memorized utterance can be recited from the decoder state alone,
    so its attention says nothing about alignment.
    """
    from dataclasses import replace

    from atisr.corpus import SyntheticSpec, generate_synthetic, synthetic_vocabulary
    from atisr.network import ArchConfig
    from atisr.seq2seq import TrainConfig, train_teacher

    spec = replace(SyntheticSpec(), min_chars=3, max_chars=5, n_train=120, n_dev=0, n_test=0,
                   min_frames_per_char=8, max_frames_per_char=12)
    train = list(generate_synthetic(spec)[0])
    vocab = synthetic_vocabulary(spec)
    arch = ArchConfig(feat_dim=spec.feat_dim, vocab_size=len(vocab), **TINY)
    model, _ = train_teacher(train, train, vocab, arch, TrainConfig(epochs=20, batch_size=10, lr=5e-3))
    return model, train
