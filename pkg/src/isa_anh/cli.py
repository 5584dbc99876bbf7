"""Command-line entry point: synth, train, eval, hsic-test, gradcheck, featurize."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .encoder import ISAModel, build_model, load_checkpoint, split_subspaces
from .evaluation import linear_probe, match_subspaces, pairwise_abs_pearson
from .hsic import median_bandwidth, pairwise_hsic, permutation_pvalue
from .objectives import ConfigError, TrainingConfig
from .speechio import log_mel, read_wav, write_lms_binary, write_lms_jsonl
from .synthgen import (
    SampleSet,
    SpecError,
    SyntheticConfig,
    ar2_sequences,
    make_problem,
    problem_metadata,
    read_dataset,
    write_dataset,
)
from .trainer import TrainingDiverged, as_sequences, gradient_audit, tiny_fixture, train

log = logging.getLogger("isa_anh")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2
METRICS = ("matched_score", "pearson_independence", "probe_accuracy", "per_pair_hsic")
HSIC_EVAL_SAMPLES = 1000


@dataclass
class Ar2Config:
    count: int = 64
    length: int = 60
    width: int = 3
    a1: float = 1.6
    a2: float = -0.9
    noise: float = 0.1
    seed: int = 0


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    data_path: str | None = None
    metrics: list[str] = field(default_factory=lambda: list(METRICS))
    synthetic: SyntheticConfig | None = None
    ar2: Ar2Config | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)


class ConfigFileError(ValueError):
    pass


def _typed(section: str, key: str, value, default):
    where = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigFileError(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFileError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigFileError(f"{where}: expected a string, got {value!r}")
    return value


def _section(cls, name: str, table) -> object:
    if not isinstance(table, dict):
        raise ConfigFileError(f"[{name}] must be a table")
    base = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigFileError(f"[{name}]: unknown key(s) {', '.join(unknown)}")
    values = {k: _typed(name, k, v, getattr(base, k)) for k, v in table.items()}
    return replace(base, **values)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate an experiment TOML document; raises ConfigFileError."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigFileError(f"{source}: {exc}") from None
    top = {"output_dir", "data_path", "metrics", "synthetic", "ar2", "training"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigFileError(f"{source}: unknown key(s) {', '.join(unknown)}")
    cfg = ExperimentConfig()
    try:
        if "output_dir" in doc:
            cfg.output_dir = _typed("", "output_dir", doc["output_dir"], "")
        if "data_path" in doc:
            cfg.data_path = _typed("", "data_path", doc["data_path"], "")
        if "metrics" in doc:
            metrics = doc["metrics"]
            if not isinstance(metrics, list) or any(m not in METRICS for m in metrics):
                raise ConfigFileError(f"metrics: expected a subset of {list(METRICS)}, got {metrics!r}")
            cfg.metrics = list(metrics)
        if "synthetic" in doc:
            cfg.synthetic = _section(SyntheticConfig, "synthetic", doc["synthetic"])
            cfg.synthetic.validate()
        if "ar2" in doc:
            cfg.ar2 = _section(Ar2Config, "ar2", doc["ar2"])
        if "training" in doc:
            cfg.training = _section(TrainingConfig, "training", doc["training"])
        cfg.training.validate()
    except (ConfigError, SpecError) as exc:
        raise ConfigFileError(f"{source}: {exc}") from None
    except ConfigFileError as exc:
        raise ConfigFileError(f"{source}: {exc}") from None
    sources = sum(x is not None for x in (cfg.data_path, cfg.synthetic, cfg.ar2))
    if sources > 1:
        raise ConfigFileError(f"{source}: give only one of data_path, [synthetic], [ar2]")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def build_data(cfg: ExperimentConfig, base: Path | None = None) -> tuple[SampleSet, dict]:
    if cfg.data_path is not None:
        path = Path(cfg.data_path)
        if base is not None and not path.is_absolute() and not path.exists():
            path = base / path
        return read_dataset(path), {"data_path": str(path)}
    if cfg.ar2 is not None:
        a = cfg.ar2
        seqs = ar2_sequences(a.count, a.length, a.width, np.random.default_rng(a.seed), (a.a1, a.a2), a.noise)
        x = seqs.reshape(-1, a.width)
        seq = np.repeat(np.arange(a.count), a.length)
        u = np.ones(x.shape[0], dtype=np.int64)
        return SampleSet(x, u, None, seq), {"ar2": asdict(a)}
    problem = make_problem(cfg.synthetic or SyntheticConfig())
    return problem.data, problem_metadata(problem)


# ---------------------------------------------------------------------------
# metrics


def hidden_frames(model: ISAModel, data: SampleSet) -> np.ndarray:
    """Encoder outputs for every sample (recurrent models run per sequence)."""
    if model.arch.backbone == "recurrent":
        seqs = as_sequences(data)
        y = model.encoder.hidden_states(seqs).detach().numpy()
        return y.reshape(-1, y.shape[-1])
    return model.encoder.hidden_states(data.x).detach().numpy()


def evaluate(model: ISAModel, data: SampleSet, metrics=METRICS, seed: int = 0) -> dict:
    arch = model.arch
    y = hidden_frames(model, data)
    subspaces = split_subspaces(y, arch.n, arch.d)
    out: dict = {}
    if "matched_score" in metrics:
        if data.s is not None and data.s.shape[1] == arch.width:
            truth = split_subspaces(data.s, arch.n, arch.d)
            report = match_subspaces(subspaces, truth)
            baseline = build_model(arch, seed=seed + 1)
            base_y = hidden_frames(baseline, data)
            out["matched_score"] = report.score
            out["baseline_score"] = match_subspaces(split_subspaces(base_y, arch.n, arch.d), truth).score
            out["assignment"] = list(report.permutation)
        else:
            out["matched_score"] = None
    if "pearson_independence" in metrics:
        out["pearson_independence"] = pairwise_abs_pearson(subspaces)
    if "probe_accuracy" in metrics:
        labels = np.asarray(data.u)
        out["probe_accuracy"] = linear_probe(y, labels, seed=seed) if np.unique(labels).size > 1 else None
    if "per_pair_hsic" in metrics:
        rng = np.random.default_rng(seed)
        idx = rng.permutation(y.shape[0])[:HSIC_EVAL_SAMPLES]
        pairs = pairwise_hsic([S[idx] for S in subspaces])
        out["per_pair_hsic"] = {f"{j}-{k}": v for (j, k), v in pairs.items()}
    out["version"] = __version__
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        if cfg.ar2 is not None:
            cfg.ar2.seed = args.seed
        else:
            cfg.synthetic = replace(cfg.synthetic or SyntheticConfig(), seed=args.seed)
    data, meta = build_data(cfg)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "data.jsonl"
    write_dataset(out, data, meta)
    print(json.dumps({"dataset": str(out), "samples": len(data), "segments": int(np.unique(data.u).size)}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.training = replace(cfg.training, seed=args.seed)
    out_dir = Path(args.out or cfg.output_dir)
    data, meta = build_data(cfg, Path(args.config).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.data_path is None:
        write_dataset(out_dir / "data.jsonl", data, meta)
    (out_dir / "config.json").write_text(
        json.dumps({"training": asdict(cfg.training), "data": meta.get("config", meta)}, indent=2, sort_keys=True)
    )
    try:
        result = train(cfg.training, data, out_dir=out_dir, log_path=out_dir / "run.jsonl")
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    final = result.checkpoints[-1]
    summary = {"steps": result.log.final.get("steps"), "checkpoint": str(final), "log": str(out_dir / "run.jsonl")}
    if args.eval:
        metrics = evaluate(result.model, data, cfg.metrics, cfg.training.seed)
        _append_metrics(out_dir / "metrics.jsonl", metrics)
        summary["metrics"] = metrics
    print(json.dumps(summary))
    return 0


def _append_metrics(path: Path, metrics: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(metrics, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = read_dataset(args.data)
    metrics = evaluate(model, data, args.metrics.split(",") if args.metrics else METRICS, args.seed)
    if args.out:
        _append_metrics(Path(args.out), metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _read_csv(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
    return arr


def cmd_hsic_test(args) -> int:
    Yj, Yk = _read_csv(args.x), _read_csv(args.y)
    sj, sk = median_bandwidth(Yj), median_bandwidth(Yk)
    value = pairwise_hsic([Yj, Yk], [sj, sk])[(0, 1)]
    p = permutation_pvalue(Yj, Yk, args.permutations, np.random.default_rng(args.seed), sj, sk)
    print(json.dumps({"hsic": value, "p_value": p, "bandwidths": [sj, sk]}))
    return 0


def cmd_gradcheck(args) -> int:
    fixture = tiny_fixture(args.seed, args.variant)
    report = gradient_audit(fixture, samples=args.samples, seed=args.seed)
    print(json.dumps(report.to_dict(), indent=2))
    return 0 if report.passed else EXIT_RUNTIME


def cmd_featurize(args) -> int:
    lms = log_mel(read_wav(args.wav), window_ms=args.window_ms, hop_ms=args.hop_ms)
    if args.format == "binary":
        write_lms_binary(args.out, lms)
    else:
        write_lms_jsonl(args.out, lms)
    print(json.dumps({"frames": len(lms), "bins": lms.frames.shape[1], "out": str(args.out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isa-anh", description=__doc__)
    ap.add_argument("--version", action="version", version=f"isa-anh {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoints and a run log")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval", action="store_true", help="evaluate the final model on the training data")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("hsic-test", help="HSIC permutation test between two CSV sample files")
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("--permutations", type=int, default=99)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_hsic_test)

    p = sub.add_parser("gradcheck", help="finite-difference audit on the built-in tiny fixture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=40)
    p.add_argument("--variant", default="paper_difference", choices=("paper_difference", "logistic"))
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("featurize", help="WAV to 80-bin log-mel features")
    p.add_argument("wav")
    p.add_argument("out")
    p.add_argument("--format", choices=("jsonl", "binary"), default="jsonl")
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.set_defaults(fn=cmd_featurize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        if args.verbose:
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
