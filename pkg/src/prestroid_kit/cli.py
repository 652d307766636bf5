"""``prestroid-kit`` command line.

Every command takes an optional JSON ``--config`` file whose keys mirror
:data:`DEFAULT_CONFIG`; flags override config values. Each run writes its
resolved configuration next to its primary output as ``<output>.config.json``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or artifact
error, 4 numeric failure (training divergence).
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .artifact import ArtifactError, load_model, save_model
from .otp import build_otp_tree, build_vocabularies
from .plan_ir import SynthConfig, Workload, WorkloadFormatError, generate_synthetic_workload, parse_workload, write_workload
from .predicate_embedding import W2VHyper, build_corpus, finalize_embedding, train_word2vec
from .sampler import SamplerConfig
from .training import Adam, TrainConfig, TrainingDiverged, featurize, run_epoch, train_model
from .tree_cnn import ArchConfig, ModelParams

log = logging.getLogger("prestroid_kit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "PRESTROID_KIT_THREADS"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "full_tree": False,
    "cost_filter": True,
    "bins": 20,
    "paths": {"workload": None, "model": None, "report_dir": None},
    "split": {"ratios": [8, 1, 1]},
    "synth": {f.name: f.default for f in dataclasses.fields(SynthConfig)},
    "sampler": {"N": 15, "C": 3, "K": 5},
    "embedding": {
        "p_f": 32,
        "window": 5,
        "min_count": 10,
        "hyper": {f.name: f.default for f in dataclasses.fields(W2VHyper)},
    },
    "arch": {"preset": "small", "dropout_rate": 0.10, "use_batchnorm": True},
    "train": {f.name: f.default for f in dataclasses.fields(TrainConfig) if f.name != "seed"},
}


class ConfigError(ValueError):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{path}' must be an object")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def resolve_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def _build(kind, fields: dict, section: str):
    try:
        return kind(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' config: {exc}") from None


def validate_config(cfg: dict) -> None:
    try:
        synth_config(cfg).validate()
    except ValueError as exc:
        raise ConfigError(f"invalid 'synth' config: {exc}") from None
    sampler_config(cfg)
    arch_config(cfg)
    train_config(cfg)
    e = cfg["embedding"]
    _build(W2VHyper, e["hyper"], "embedding.hyper")
    for key in ("p_f", "window", "min_count"):
        if not isinstance(e[key], int) or e[key] < 1:
            raise ConfigError(f"config key 'embedding.{key}' must be a positive integer")
    if not isinstance(cfg["bins"], int) or cfg["bins"] < 1:
        raise ConfigError("config key 'bins' must be a positive integer")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("config key 'seed' must be an integer")
    ratios = cfg["split"]["ratios"]
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigError("config key 'split.ratios' must be three nonnegative numbers")


def synth_config(cfg: dict) -> SynthConfig:
    return _build(SynthConfig, cfg["synth"], "synth")


def sampler_config(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    if cfg["full_tree"]:
        return _build(SamplerConfig, {"N": None, "C": s["C"], "K": 1}, "sampler")
    return _build(SamplerConfig, s, "sampler")


def arch_config(cfg: dict) -> ArchConfig:
    a = dict(cfg["arch"])
    preset = a.pop("preset")
    try:
        return ArchConfig.preset(preset, **a)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid 'arch' config: {exc}") from None


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, {**cfg["train"], "seed": cfg["seed"]}, "train")


def write_resolved(cfg: dict, output: str | Path) -> Path:
    path = Path(str(output) + ".config.json")
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _workload_path(args, cfg) -> str:
    path = getattr(args, "workload", None) or cfg["paths"]["workload"]
    if not path:
        raise ConfigError("no workload path given (--workload or paths.workload)")
    if not Path(path).is_file():
        raise ConfigError(f"workload file not found: {path}")
    return path


def _load_workload(path: str, cost_filter: bool) -> Workload:
    return parse_workload(path, cost_filter=cost_filter)


def cmd_synth(args, cfg) -> int:
    out = args.out or cfg["paths"]["workload"]
    if not out:
        raise ConfigError("synth needs --out")
    with stage("synth"):
        wl = generate_synthetic_workload(synth_config(cfg), cfg["seed"])
        write_workload(wl, out)
    write_resolved(cfg, out)
    print(f"wrote {len(wl)} traces to {out}")
    return EXIT_OK


def _fit_embedding(train_wl: Workload, cfg: dict):
    e = cfg["embedding"]
    emb = train_word2vec(
        build_corpus(train_wl), e["p_f"], e["window"], e["min_count"], W2VHyper(**e["hyper"]), seed=cfg["seed"]
    )
    return finalize_embedding(emb, [build_otp_tree(t.root) for t in train_wl])


def cmd_train_embeddings(args, cfg) -> int:
    path = _workload_path(args, cfg)
    out = args.out
    if not out:
        raise ConfigError("train-embeddings needs --out")
    with stage("load"):
        wl = _load_workload(path, cfg["cost_filter"])
    with stage("word2vec"):
        emb = _fit_embedding(wl, cfg)
        emb.export_text(out)
    write_resolved(cfg, out)
    print(f"{len(emb)} tokens x {emb.p_f} dims written to {out}")
    return EXIT_OK


def run_training(wl: Workload, cfg: dict):
    """split -> transform -> corpus/word2vec -> vocab -> train; returns (model, result)."""
    with stage("split"):
        splits = ev.split_workload(wl, cfg["split"]["ratios"], seed=cfg["seed"])
        if len(splits["train"]) < 2 or len(splits["val"]) == 0:
            raise ValueError("workload too small for a train/validation split")
    with stage("transform"):
        transform = ev.fit_transform([t.total_cpu_min for t in splits["train"]])
    with stage("word2vec"):
        emb = _fit_embedding(splits["train"], cfg)
    with stage("vocab"):
        vocab = build_vocabularies(splits["train"])
    with stage("train"):
        model, result = train_model(
            splits, arch_config(cfg), train_config(cfg), emb, vocab, sampler_config(cfg), transform
        )
    model.meta["split"] = {"seed": cfg["seed"], "ratios": list(cfg["split"]["ratios"])}
    model.meta["cost_filter"] = cfg["cost_filter"]
    return model, result


def _history_csv(history: list[dict], seconds: list[float] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for h in history:
        w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"])])
    return buf.getvalue()


def cmd_train(args, cfg) -> int:
    path = _workload_path(args, cfg)
    out = args.out or cfg["paths"]["model"]
    if not out:
        raise ConfigError("train needs --out (or paths.model)")
    with stage("load"):
        wl = _load_workload(path, cfg["cost_filter"])
    model, result = run_training(wl, cfg)
    with stage("save"):
        checksum = save_model(model, out)
        hist_path = args.csv_out or str(out) + ".history.csv"
        Path(hist_path).write_text(_history_csv(model.history), encoding="utf-8")
    write_resolved(cfg, out)
    print(f"model written to {out} (sha256 {checksum})")
    print(f"epochs run {len(model.history)}, best epoch {result.best_epoch}, "
          f"best val loss {min(h['val_loss'] for h in model.history):.6g}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    model = load_model(_model_path(args, cfg))
    path = _workload_path(args, cfg)
    with stage("load"):
        wl = _load_workload(path, cost_filter=False)
    with stage("predict"):
        preds = model.predict_many(wl)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "predicted_min"])
    for t, p in zip(wl, preds):
        w.writerow([t.query_id, repr(float(p))])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
        write_resolved(cfg, args.out)
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _model_path(args, cfg) -> str:
    path = getattr(args, "model", None) or cfg["paths"]["model"]
    if not path:
        raise ConfigError("no model path given (--model or paths.model)")
    if not Path(path).is_file():
        raise ConfigError(f"model file not found: {path}")
    return path


def evaluate_model(model, eval_wl: Workload, train_wl: Workload, bins: int) -> dict:
    actual = np.array([t.total_cpu_min for t in eval_wl])
    pred = model.predict_many(eval_wl)
    lb = ev.log_binning_fit(train_wl, bins)
    base = np.array([ev.log_binning_predict(lb, t) for t in eval_wl])
    m_mse, b_mse = ev.mse_minutes(pred, actual), ev.mse_minutes(base, actual)
    prov = ev.provisioning_report(pred, actual)
    bprov = ev.provisioning_report(base, actual)
    return {
        "queries": len(eval_wl),
        "bins": bins,
        "model_mse": m_mse,
        "logbin_mse": b_mse,
        "mse_ratio": m_mse / b_mse if b_mse > 0 else float("inf"),
        "model_over_pct": prov["over_pct"],
        "model_under_pct": prov["under_pct"],
        "logbin_over_pct": bprov["over_pct"],
        "logbin_under_pct": bprov["under_pct"],
    }


_UNITS = {
    "queries": "count", "bins": "count", "model_mse": "minutes^2", "logbin_mse": "minutes^2",
    "mse_ratio": "ratio", "model_over_pct": "percent", "model_under_pct": "percent",
    "logbin_over_pct": "percent", "logbin_under_pct": "percent",
}


def cmd_evaluate(args, cfg) -> int:
    model = load_model(_model_path(args, cfg))
    path = _workload_path(args, cfg)
    cost_filter = cfg["cost_filter"]
    with stage("load"):
        wl = _load_workload(path, cost_filter)
        split_meta = model.meta.get("split", {"seed": cfg["seed"], "ratios": cfg["split"]["ratios"]})
        splits = ev.split_workload(wl, split_meta["ratios"], seed=split_meta["seed"])
        train_wl = _load_workload(args.train_workload, cost_filter) if args.train_workload else splits["train"]
        eval_wl = wl if args.split == "all" else splits[args.split]
        if len(eval_wl) == 0:
            raise ValueError(f"split {args.split!r} is empty")
    with stage("evaluate"):
        report = evaluate_model(model, eval_wl, train_wl, cfg["bins"])
    print(f"# provisioning: {ev.PROVISIONING_DEFINITION}")
    for key, val in report.items():
        print(f"{key:18s} {val:.6g} {_UNITS[key]}" if isinstance(val, float) else f"{key:18s} {val} {_UNITS[key]}")
    if args.csv_out:
        Path(args.csv_out).write_text(ev.metrics_csv([(k, v, _UNITS[k]) for k, v in report.items()]), encoding="utf-8")
        write_resolved(cfg, args.csv_out)
    return EXIT_OK


def _parse_nk(text: str | None):
    if text is None or text == "full":
        return None
    try:
        n, k = (int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"expected 'N,K' or 'full', got {text!r}") from None
    if n < 1 or k < 1:
        raise ConfigError("N and K must be positive")
    return n, k


def cmd_footprint(args, cfg) -> int:
    path = _workload_path(args, cfg)
    with stage("load"):
        wl = _load_workload(path, cfg["cost_filter"])
        if len(wl) == 0:
            raise ValueError("workload is empty")
        vocab = build_vocabularies(wl)
    sub = _parse_nk(args.sub) if args.sub else (cfg["sampler"]["N"], cfg["sampler"]["K"])
    ref = _parse_nk(args.ref)
    f = vocab.feature_size(cfg["embedding"]["p_f"])
    rep = ev.workload_footprint(wl, sub, ref, args.batch, f)
    print(f"batch {rep.batch_size}, features per node {f}")
    for row in rep.rows():
        print(f"{row['config']:>8s} features {row['elements_features']:>12d} indices {row['elements_indices']:>10d} "
              f"factor {row['factor']:.4g}")
    if args.csv_out:
        Path(args.csv_out).write_text(rep.to_csv(), encoding="utf-8")
        write_resolved(cfg, args.csv_out)
    return EXIT_OK


def bench_epochs(wl: Workload, cfg: dict, full_tree: bool, repetitions: int) -> float:
    cfg = {**cfg, "full_tree": full_tree}
    splits = ev.split_workload(wl, cfg["split"]["ratios"], seed=cfg["seed"])
    transform = ev.fit_transform([t.total_cpu_min for t in splits["train"]])
    emb = _fit_embedding(splits["train"], cfg)
    vocab = build_vocabularies(splits["train"])
    tcfg = train_config(cfg)
    feats = featurize(splits["train"], vocab, emb, sampler_config(cfg), transform, dtype=np.dtype(tcfg.dtype))
    b = feats.batch
    params = ModelParams.init(arch_config(cfg), b.features.shape[3], b.features.shape[1], tcfg.seed, np.dtype(tcfg.dtype))
    opt = Adam(params.weights, tcfg)
    order_rng = np.random.default_rng([tcfg.seed, 1])
    drop_rng = np.random.default_rng([tcfg.seed, 2])
    return ev.epoch_timing_bench(lambda: run_epoch(params, opt, b, tcfg, order_rng, drop_rng), repetitions)


def cmd_bench(args, cfg) -> int:
    path = _workload_path(args, cfg)
    with stage("load"):
        wl = _load_workload(path, cfg["cost_filter"])
    rows = []
    with stage("bench"):
        sub_s = bench_epochs(wl, cfg, False, args.repetitions)
        rows.append(("subtree_epoch_seconds", sub_s, "seconds"))
        if not args.skip_full:
            full_s = bench_epochs(wl, cfg, True, args.repetitions)
            rows.append(("full_tree_epoch_seconds", full_s, "seconds"))
            rows.append(("speedup", full_s / sub_s, "ratio"))
        rows.append(("subtree_cost_usd", ev.cost_projection(sub_s, args.epochs, args.hourly_rate), "usd"))
        if not args.skip_full:
            rows.append(("full_tree_cost_usd", ev.cost_projection(full_s, args.epochs, args.hourly_rate), "usd"))
    for name, val, unit in rows:
        shown = ev.format_usd(val) if unit == "usd" else f"{val:.6g}"
        print(f"{name:24s} {shown} {unit}")
    if args.csv_out:
        Path(args.csv_out).write_text(ev.metrics_csv(rows), encoding="utf-8")
        write_resolved(cfg, args.csv_out)
    return EXIT_OK


def cmd_drift(args, cfg) -> int:
    for p in (args.reference, args.future):
        if not Path(p).is_file():
            raise ConfigError(f"workload file not found: {p}")
    with stage("load"):
        ref = _load_workload(args.reference, cfg["cost_filter"])
        fut = _load_workload(args.future, cfg["cost_filter"])
    with stage("drift"):
        pct = ev.table_drift(ref, fut)
    print(f"unseen tables in future window: {pct:.4g}%")
    if args.csv_out:
        Path(args.csv_out).write_text(ev.metrics_csv([("table_drift_pct", pct, "percent")]), encoding="utf-8")
        write_resolved(cfg, args.csv_out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--no-cost-filter", action="store_true", help="keep traces outside [1, 60] minutes")
    common.add_argument("--csv-out", help="machine-readable CSV output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prestroid-kit", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic workload")
    s.add_argument("--count", type=int)
    s.add_argument("--out")

    s = sub.add_parser("train-embeddings", parents=[common], help="train predicate token embeddings")
    s.add_argument("--workload")
    s.add_argument("--out")

    s = sub.add_parser("train", parents=[common], help="train a cost model")
    s.add_argument("--workload")
    s.add_argument("--out")
    s.add_argument("--full-tree", action="store_true", help="one padded tree per query instead of sub-trees")

    s = sub.add_parser("predict", parents=[common], help="predict CPU minutes per query")
    s.add_argument("--model")
    s.add_argument("--workload")
    s.add_argument("--out")

    s = sub.add_parser("evaluate", parents=[common], help="MSE, provisioning and log-binning baseline")
    s.add_argument("--model")
    s.add_argument("--workload")
    s.add_argument("--train-workload", help="fit the baseline here instead of the train split")
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="val")
    s.add_argument("--bins", type=int)

    s = sub.add_parser("footprint", parents=[common], help="padded batch element counts")
    s.add_argument("--workload")
    s.add_argument("--sub", help="sub-tree config 'N,K' (default from config)")
    s.add_argument("--ref", default="full", help="reference config 'N,K' or 'full'")
    s.add_argument("--batch", type=int, default=32)

    s = sub.add_parser("bench", parents=[common], help="epoch timing, sub-tree vs full tree")
    s.add_argument("--workload")
    s.add_argument("--repetitions", type=int, default=2)
    s.add_argument("--epochs", type=float, default=100, help="epochs assumed by the cost projection")
    s.add_argument("--hourly-rate", type=float, default=4.23)
    s.add_argument("--skip-full", action="store_true")

    s = sub.add_parser("drift", parents=[common], help="share of unseen tables in a future window")
    s.add_argument("--reference", required=True)
    s.add_argument("--future", required=True)
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.no_cost_filter:
        o["cost_filter"] = False
    if getattr(args, "full_tree", False):
        o["full_tree"] = True
    if getattr(args, "bins", None) is not None:
        o["bins"] = args.bins
    if getattr(args, "count", None) is not None:
        o["synth"] = {"count": args.count}
    return o


COMMANDS = {
    "synth": cmd_synth,
    "train-embeddings": cmd_train_embeddings,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "footprint": cmd_footprint,
    "bench": cmd_bench,
    "drift": cmd_drift,
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, TrainingDiverged):
        return EXIT_NUMERIC
    if isinstance(exc, (WorkloadFormatError, ArtifactError, KeyError, ValueError, OSError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, _overrides(args))
        if args.command == "evaluate" and args.bins is not None and args.bins < 1:
            raise ConfigError("--bins must be >= 1")
        with _thread_limit():
            return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
