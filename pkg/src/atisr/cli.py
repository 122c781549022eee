"""Command-line pipeline: one subcommand per experimental stage.

Every stage reads its inputs from disk and writes artifacts that embed the
experiment config plus hashes of the inputs they were built from, so any
stage can be rerun (or audited) from the files alone.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import wave
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import IsrConfig
from .corpus import (FIRST_CHAR_ID, Dataset, SyntheticSpec, Utterance, Vocabulary, file_sha256,
                     generate_synthetic, load_dataset, mel_features, save_dataset, synthetic_vocabulary)
from .distill import build_student_dataset, load_student_dataset, save_student_dataset
from .errors import AtisrError, ConfigurationError, IntegrityError
from .isr import IncrementalHypothesis, baseline_isr_decode, isr_decode, save_hypotheses, train_student
from .metrics import EvalReport, MODES, evaluate, format_table
from .network import ArchConfig
from .seq2seq import TrainConfig, greedy_decode, load_checkpoint, save_checkpoint, train_teacher

log = logging.getLogger("atisr")

# Desk-scale architecture used for the synthetic task.
DESK_ARCH = dict(proj_dim=64, enc_hidden=64, dec_hidden=64, emb_dim=32, att_dim=64, scorer="mlp")
SPLITS = ("train", "dev", "test")
INIT_FLAGS = {"m": "begin_block_token", "last-char": "last_prev_char"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: dict = field(default_factory=dict)  # SyntheticSpec overrides
    arch: dict = field(default_factory=lambda: dict(DESK_ARCH))
    teacher: dict = field(default_factory=dict)  # TrainConfig overrides
    student: dict = field(default_factory=dict)
    isr: dict = field(default_factory=dict)  # IsrConfig overrides
    max_len: int = 300

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise IntegrityError(f"config file missing: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.arch = {**DESK_ARCH, **cfg.arch}
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**{"seed": self.seed, **self.data})

    def train_config(self, which: str) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **getattr(self, which)})


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _out(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out is required for this command")
    return Path(args.out)


def _isr_config(args, exp: ExperimentConfig, base: dict | None = None) -> IsrConfig:
    d = {**(base or {}), **exp.isr}
    for flag, key in (("main_blocks", "main_blocks"), ("look_back", "look_back"),
                      ("look_ahead", "look_ahead"), ("state", "state_policy"),
                      ("max_step_outputs", "max_step_outputs")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "init", None) is not None:
        d["init_policy"] = INIT_FLAGS[args.init]
    return IsrConfig(**d)


def _data_dir(args) -> Path:
    p = Path(args.data)
    if not p.exists():
        raise IntegrityError(f"data directory missing: {p}")
    return p


def _manifest(data: Path, split: str) -> Path:
    return data if data.is_file() else data / f"{split}.jsonl"


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args, exp: ExperimentConfig) -> int:
    out = _out(args)
    spec = exp.synthetic_spec()
    splits = generate_synthetic(spec)
    vocab = synthetic_vocabulary(spec)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    hashes = {}
    for name, ds in zip(SPLITS, splits):
        save_dataset(ds, out / f"{name}.jsonl")
        hashes[name] = file_sha256(out / f"{name}.jsonl")
    _write_json(out / "provenance.json", {"stage": "gen-data", "config": exp.to_dict(),
                                          "spec": spec.to_dict(), "manifests": hashes,
                                          "vocab": file_sha256(out / "vocab.txt")})
    print(f"wrote {sum(len(s) for s in splits)} utterances to {out}")
    return 0


def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    if not path.exists():
        raise IntegrityError(f"audio file missing: {path}")
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ConfigurationError(f"{path}: only 16-bit PCM is supported")
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").astype(np.float64) / 32768.0
        x = raw.reshape(-1, w.getnchannels()).mean(axis=1)
        return x, w.getframerate()


def cmd_featurize(args, exp: ExperimentConfig) -> int:
    """Log-mel features for a list of ``id<TAB>wav path<TAB>transcript`` lines."""
    out = _out(args)
    listing = Path(args.input)
    if not listing.exists():
        raise IntegrityError(f"input list missing: {listing}")
    utts, chars = [], set()
    for line in listing.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        uid, wav, text = line.split("\t")
        x, sr = _read_wav(listing.parent / wav)
        if sr != 16000:
            raise ConfigurationError(f"{wav}: expected 16 kHz audio, got {sr} Hz")
        utts.append(Utterance(uid, mel_features(x, sr), text))
        chars.update(text)
    out.mkdir(parents=True, exist_ok=True)
    name = args.split or "train"
    save_dataset(Dataset(utts), out / f"{name}.jsonl")
    vpath = out / "vocab.txt"
    if not vpath.exists():
        Vocabulary(sorted(chars)).save(vpath)
    print(f"featurized {len(utts)} utterances into {out / f'{name}.jsonl'}")
    return 0


def cmd_train_teacher(args, exp: ExperimentConfig) -> int:
    data, out = _data_dir(args), _out(args)
    vocab = Vocabulary.load(data / "vocab.txt")
    train = load_dataset(_manifest(data, "train"))
    dev = load_dataset(data / "dev.jsonl") if (data / "dev.jsonl").exists() else Dataset()
    arch = ArchConfig(feat_dim=train[0].features.shape[1], vocab_size=len(vocab), **exp.arch)
    model, _ = train_teacher(train, dev, vocab, arch, exp.train_config("teacher"), init_seed=exp.seed)
    model.meta["provenance"] = {"config": exp.to_dict(),
                                "inputs": {s: file_sha256(data / f"{s}.jsonl")
                                           for s in ("train", "dev") if (data / f"{s}.jsonl").exists()}}
    digest = save_checkpoint(model, out)
    print(f"teacher checkpoint {out} sha256 {digest}")
    return 0


def cmd_distill(args, exp: ExperimentConfig) -> int:
    data, out = _data_dir(args), _out(args)
    teacher = load_checkpoint(args.teacher)
    cfg = _isr_config(args, exp)
    for split in ("train", "dev"):
        manifest = data / f"{split}.jsonl"
        if not manifest.exists():
            continue
        corpus = load_dataset(manifest)
        ds = build_student_dataset(teacher, corpus, cfg)
        ds.extra = {"arch": teacher.arch.to_dict(), "vocab": teacher.vocab.tokens,
                    "config": exp.to_dict(), "source_manifest": file_sha256(manifest)}
        lines = [json.loads(ln) for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
        paths = {r["id"]: manifest.parent / r["feature_path"] for r in lines}
        save_student_dataset(ds, out / f"{split}.seg.jsonl", paths)
        print(f"{split}: {len(ds)} segmented utterances, {len(ds.failures)} failures")
    return 0


def cmd_train_student(args, exp: ExperimentConfig) -> int:
    data, out = _data_dir(args), _out(args)
    train = load_student_dataset(data / "train.seg.jsonl")
    dev_path = data / "dev.seg.jsonl"
    dev = load_student_dataset(dev_path) if dev_path.exists() else None
    cfg = _isr_config(args, exp, train.cfg.to_dict())
    vocab = Vocabulary(train.extra["vocab"][FIRST_CHAR_ID:])
    arch = ArchConfig.from_dict(train.extra["arch"])
    model, _ = train_student(train, dev, arch, cfg, exp.train_config("student"), vocab, init_seed=exp.seed)
    model.meta["provenance"] = {"config": exp.to_dict(),
                                "inputs": {p.name: file_sha256(p) for p in (data / "train.seg.jsonl", dev_path)
                                           if p.exists()}}
    digest = save_checkpoint(model, out)
    print(f"student checkpoint {out} sha256 {digest}")
    return 0


def _decode_cfg(args, exp, model) -> IsrConfig:
    return _isr_config(args, exp, model.meta.get("isr"))


def _decode_one(model, x, mode, cfg, max_len) -> IncrementalHypothesis:
    if mode == "full":
        ids, _ = greedy_decode(model, x, max_len)
        return IncrementalHypothesis([ids], [x.shape[0]])
    if mode == "isr":
        return isr_decode(model, x, cfg)
    return baseline_isr_decode(model, x, cfg)


def cmd_decode(args, exp: ExperimentConfig) -> int:
    out = _out(args)
    model = load_checkpoint(args.model)
    manifest = _manifest(_data_dir(args), args.split)
    ds = load_dataset(manifest)
    cfg = _decode_cfg(args, exp, model)
    recs = [(u.id, _decode_one(model, u.features, args.mode, cfg, exp.max_len)) for u in ds]
    save_hypotheses(recs, model.vocab, out)
    print(f"decoded {len(recs)} utterances to {out}")
    return 0


def cmd_eval(args, exp: ExperimentConfig) -> int:
    out = _out(args)
    model = load_checkpoint(args.model)
    manifest = _manifest(_data_dir(args), args.split)
    ds = load_dataset(manifest)
    cfg = _decode_cfg(args, exp, model)
    t0 = time.perf_counter()
    rep = evaluate(model, ds, args.mode, cfg, exp.max_len)
    log.info("decoded %d utterances in %.2fs wall clock", len(ds), time.perf_counter() - t0)
    body = rep.to_dict()
    body["provenance"] = {"config": exp.to_dict(), "manifest": str(manifest),
                          "manifest_sha256": file_sha256(manifest),
                          "checkpoint_meta_sha256": _sha(model.meta)}
    body["label"] = args.label or (args.mode if args.mode == "full" else f"{args.mode}:{cfg.label()}")
    _write_json(out, body)
    print(f"{body['label']}: CER {100 * rep.corpus_cer:.2f}% delay {rep.delay_s:.4f}s -> {out}")
    return 0


def cmd_report(args, exp: ExperimentConfig) -> int:
    rows = []
    for p in args.reports:
        p = Path(p)
        if not p.exists():
            raise IntegrityError(f"report missing: {p}")
        d = json.loads(p.read_text(encoding="utf-8"))
        rep = EvalReport(d["mode"], d["corpus_cer"], d["total_edits"], d["total_ref_chars"], d["delay_s"])
        rows.append((d.get("label", p.stem), rep))
    text = format_table(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "featurize": cmd_featurize, "train-teacher": cmd_train_teacher,
            "distill": cmd_distill, "train-student": cmd_train_student, "decode": cmd_decode,
            "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="experiment config (JSON)")
    shared.add_argument("--seed", type=int, help="overrides the config seed")
    shared.add_argument("--threads", type=int, default=1, help="worker bound (computation is single-threaded)")
    shared.add_argument("--out", help="output path")
    shared.add_argument("-v", "--verbose", action="store_true")

    isr = argparse.ArgumentParser(add_help=False)
    isr.add_argument("--main-blocks", type=int)
    isr.add_argument("--look-back", type=int)
    isr.add_argument("--look-ahead", type=int)
    isr.add_argument("--state", choices=("keep", "reset"))
    isr.add_argument("--init", choices=tuple(INIT_FLAGS))
    isr.add_argument("--max-step-outputs", type=int)

    parser = argparse.ArgumentParser(prog="atisr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[shared], help="generate the synthetic corpus")
    p = sub.add_parser("featurize", parents=[shared], help="log-mel features from 16 kHz wav files")
    p.add_argument("--input", required=True, help="lines of id<TAB>wav<TAB>transcript")
    p.add_argument("--split", default="train")
    p = sub.add_parser("train-teacher", parents=[shared], help="train the full-utterance model")
    p.add_argument("--data", required=True)
    p = sub.add_parser("distill", parents=[shared, isr], help="segment targets from teacher attention")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p = sub.add_parser("train-student", parents=[shared, isr], help="train the incremental model")
    p.add_argument("--data", required=True, help="directory written by distill")
    for name, extra in (("decode", "write hypotheses"), ("eval", "write an evaluation report")):
        p = sub.add_parser(name, parents=[shared, isr], help=extra)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--mode", choices=MODES, default="full")
        if name == "eval":
            p.add_argument("--label")
    p = sub.add_parser("report", parents=[shared], help="table of evaluation reports")
    p.add_argument("reports", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        exp = ExperimentConfig.load(args.config)
        if args.seed is not None:
            exp.seed = args.seed
        return COMMANDS[args.command](args, exp)
    except (AtisrError, OSError, ValueError, KeyError) as e:
        print(f"atisr {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
