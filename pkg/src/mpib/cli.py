"""Command-line driver: seeded, validated experiment runs with machine-readable
reports.

Every subcommand resolves its configuration in three layers — built-in
defaults, then an optional JSON config file, then command-line flags (flags
win) — validates the result completely before any compute, and embeds the
resolved config plus a content hash and the seed in the report it writes.
Identical inputs therefore produce byte-identical reports (wall-clock timing
fields in `bench` are the one unavoidable exception).

Exit codes are a stable contract: 0 success, 1 runtime failure, 2 bad config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import quant, synth

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

_CORPUS_KEYS = {
    "n_speakers": 12, "sessions": 2, "windows_per_session": 6,
    "noise_fraction": 0.1,
}
_TRAIN_KEYS = {
    "bits": 4, "state_dim": 32, "preset": "impl", "epochs": 2,
    "warm_epochs": 1, "ft_epochs": 1, "batch_speakers": 8,
}

#: per-command defaults; the key set doubles as the schema (unknown keys are
#: rejected during validation)
COMMAND_DEFAULTS = {
    "synth": dict(_CORPUS_KEYS),
    "pretrain": dict(_CORPUS_KEYS, steps=40, mask_ratio=0.75, lr=1e-4),
    "train": dict(_CORPUS_KEYS, sessions=3, windows_per_session=8,
                  **_TRAIN_KEYS),
    "eval": dict(_CORPUS_KEYS, n_speakers=20, sessions=4,
                 windows_per_session=8, enrollment_per_spk=3, **_TRAIN_KEYS),
    "sweep": dict(_CORPUS_KEYS, n_speakers=20, sessions=3,
                  windows_per_session=6, bits_list=[4, 16], preset="impl",
                  epochs=1, warm_epochs=0, ft_epochs=1, batch_speakers=8,
                  resamples=50),
    "leakage": dict(_CORPUS_KEYS, n_speakers=20, sessions=3,
                    windows_per_session=8, enrollment_per_spk=3,
                    resamples=200, **_TRAIN_KEYS),
    "privacy-tradeoff": dict(_CORPUS_KEYS, n_speakers=15, sessions=4,
                             preset="impl", epochs=2, warm_epochs=1,
                             ft_epochs=1, batch_speakers=8, sigma_grid=None),
    "energy": {"p_active_mw": 110.0, "p_idle_mw": 15.0,
               "inference_s": 0.0234, "cadence_s": 5.0, "window_s": 0.640},
    "bench": {"m": 1, "k": 64, "n": 32, "a_bits": 8, "b_bits": 4, "iters": 30},
}

_SHARED_DEFAULTS = {"seed": 0, "out": ".", "format": "json"}


# ---------------------------------------------------------------------------
# config resolution and validation


def resolve_config(command: str, file_config: dict | None = None,
                   overrides: dict | None = None) -> dict:
    """Layer defaults <- config file <- flags; flags win."""
    cfg = dict(_SHARED_DEFAULTS)
    cfg.update(COMMAND_DEFAULTS[command])
    for layer in (file_config or {}), (overrides or {}):
        cfg.update({k: v for k, v in layer.items() if v is not None})
    return cfg


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return _is_int(v) or isinstance(v, float)


def validate_config(command: str, cfg: dict) -> list:
    """Full constraint check before any compute; errors are collected, not
    raised at first failure."""
    errors = []
    known = set(_SHARED_DEFAULTS) | set(COMMAND_DEFAULTS[command])
    for key in sorted(set(cfg) - known):
        errors.append(f"unknown config key: {key}")

    def need(key, ok, message):
        if key in cfg and key not in (set(cfg) - known) and not ok(cfg[key]):
            errors.append(f"{key}: {message} (got {cfg[key]!r})")

    need("seed", _is_int, "must be an integer")
    need("format", lambda v: v in ("json", "csv"), "must be json or csv")
    need("out", lambda v: isinstance(v, str) and v, "must be a path")

    for key in ("n_speakers", "sessions", "windows_per_session", "steps",
                "epochs", "warm_epochs", "ft_epochs", "batch_speakers",
                "state_dim", "enrollment_per_spk", "resamples", "m", "k", "n",
                "iters"):
        need(key, _is_int, "must be an integer")
    int_ok = {k for k in cfg if _is_int(cfg.get(k))}

    if "bits" in cfg or "b_bits" in cfg:
        key = "bits" if "bits" in cfg else "b_bits"
        v = cfg[key]
        if not _is_int(v) or v not in quant.SUPPORTED_BITS:
            errors.append(f"unsupported precision: {v} bits")
    if "a_bits" in cfg and cfg["a_bits"] != 8:
        errors.append(f"a_bits: activations must be 8-bit codes "
                      f"(got {cfg['a_bits']!r})")
    if "bits_list" in cfg:
        v = cfg["bits_list"]
        if not isinstance(v, (list, tuple)) or not v:
            errors.append(f"bits_list: must be a non-empty list (got {v!r})")
        else:
            for b in v:
                if not _is_int(b) or b not in quant.SUPPORTED_BITS:
                    errors.append(f"unsupported precision: {b} bits")
    if "sigma_grid" in cfg and cfg["sigma_grid"] is not None:
        v = cfg["sigma_grid"]
        if not isinstance(v, (list, tuple)) or not v:
            errors.append(f"sigma_grid: must be a non-empty list (got {v!r})")
        else:
            for s in v:
                if not _is_num(s):
                    errors.append(f"sigma_grid: entries must be numbers "
                                  f"(got {s!r})")
                elif s < 0:
                    errors.append(f"negative sigma: {s}")

    need("n_speakers", lambda v: v >= 10, "need at least 10 speakers")
    need("sessions", lambda v: 1 <= v <= len(synth.SESSIONS),
         f"must be between 1 and {len(synth.SESSIONS)}")
    need("windows_per_session", lambda v: v >= 2,
         "need at least 2 windows per session for consecutive pairs")
    need("noise_fraction", lambda v: _is_num(v) and 0.0 <= v <= 1.0,
         "must be in [0, 1]")
    need("preset", lambda v: v in ("impl", "exp"), "must be impl or exp")
    for key in ("steps", "epochs", "batch_speakers", "state_dim",
                "enrollment_per_spk", "resamples", "m", "k", "n", "iters"):
        if key in int_ok:
            need(key, lambda v: v >= 1, "must be >= 1")
    for key in ("warm_epochs", "ft_epochs"):
        if key in int_ok:
            need(key, lambda v: v >= 0, "must be >= 0")
    if "warm_epochs" in int_ok and "epochs" in int_ok \
            and cfg["warm_epochs"] > cfg["epochs"]:
        errors.append("warm_epochs: cannot exceed epochs "
                      f"(got {cfg['warm_epochs']} > {cfg['epochs']})")
    need("mask_ratio", lambda v: _is_num(v) and 0.0 < v < 1.0,
         "must be in (0, 1)")
    need("lr", lambda v: _is_num(v) and v > 0, "must be positive")
    need("p_active_mw", lambda v: _is_num(v) and v >= 0, "must be >= 0")
    for key in ("p_idle_mw", "inference_s", "cadence_s", "window_s"):
        need(key, lambda v: _is_num(v) and v > 0, "must be positive")
    if command == "privacy-tradeoff" and cfg.get("sessions") != 4:
        errors.append("sessions: the privacy trade-off probes the final "
                      "session, so all 4 sessions are required")
    return errors


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# report emission


def _round6(obj):
    """Clamp every float to 6 significant digits so JSON round-trips losslessly."""
    if isinstance(obj, bool):
        return obj
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.6g}")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    return obj


def _flatten(row: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in row.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)):
            flat[name] = "; ".join(str(_round6(v)) for v in value)
        else:
            flat[name] = _round6(value)
    return flat


def emit_report(results, path: str | Path, *, command: str, cfg: dict,
                fmt: str, columns: list | None = None) -> Path:
    """Write the report file: stable field ordering, floats at 6 significant
    digits, resolved config + hash + seed embedded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    if fmt == "json":
        doc = {"command": command, "config": _round6(cfg),
               "config_hash": digest, "seed": cfg["seed"],
               "results": _round6(results)}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    import csv as _csv
    rows = [_flatten(r) for r in (results if isinstance(results, list)
                                  else [results])]
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    header = list(columns) + ["config_hash", "seed"]
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            cells = [row.get(c, "") for c in columns]
            writer.writerow([f"{c:.6g}" if isinstance(c, float) else c
                             for c in cells] + [digest, cfg["seed"]])
    return path


# ---------------------------------------------------------------------------
# subcommand runners (each returns results; list-of-rows renders as CSV rows)


def _thread_cap() -> None:
    cap = os.environ.get("MPIB_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))


def _make_corpus(cfg: dict) -> synth.Corpus:
    return synth.generate_corpus(
        n_speakers=cfg["n_speakers"], sessions=cfg["sessions"],
        windows_per_session=cfg["windows_per_session"], seed=cfg["seed"],
        noise_fraction=cfg["noise_fraction"])


def _scale(cfg: dict):
    from . import protocols

    return protocols.ExperimentScale(
        epochs=cfg["epochs"], warm_epochs=cfg["warm_epochs"],
        ft_epochs=cfg["ft_epochs"], batch_speakers=cfg["batch_speakers"],
        resamples=cfg.get("resamples", 50))


def _train_config(cfg: dict):
    from . import training

    return training.get_preset(cfg["preset"], epochs=cfg["epochs"],
                               seed=cfg["seed"],
                               batch_speakers=cfg["batch_speakers"])


def run_synth(cfg: dict, out_dir: Path):
    corpus = _make_corpus(cfg)
    manifest = corpus.save(out_dir / "corpus")
    return {
        "manifest": str(manifest.relative_to(out_dir)),
        "n_windows": len(corpus),
        "n_speakers": corpus.n_speakers,
        "noise_fraction": float(corpus.noise_injected.mean()),
        "agitation_mean": float(corpus.agitation.mean()),
        "agitation_std": float(corpus.agitation.std()),
    }


def run_pretrain(cfg: dict, out_dir: Path):
    from . import training
    from .model import DualHeadModel, ModelConfig

    corpus = _make_corpus(cfg)
    model = DualHeadModel(ModelConfig(seed=cfg["seed"]))
    trace = training.pretrain_tmae(model, corpus.features,
                                   steps=cfg["steps"], lr=cfg["lr"],
                                   mask_ratio=cfg["mask_ratio"],
                                   seed=cfg["seed"])
    return {"steps": len(trace), "loss_first": trace[0],
            "loss_last": trace[-1], "loss_drop": trace[0] - trace[-1]}


def run_train(cfg: dict, out_dir: Path):
    from . import training
    from .model import DualHeadModel, ModelConfig

    corpus = _make_corpus(cfg)
    model = DualHeadModel(ModelConfig(state_bits=cfg["bits"],
                                      state_dim=cfg["state_dim"],
                                      personalized=False, seed=cfg["seed"]))
    history = training.train_staged(model, corpus.to_training_data(),
                                    _train_config(cfg),
                                    float_epochs=cfg["epochs"],
                                    warm_epochs=cfg["warm_epochs"],
                                    ft_epochs=cfg["ft_epochs"])
    return [{k: row[k] for k in training.LOG_FIELDS} for row in history]


def run_eval(cfg: dict, out_dir: Path):
    from . import protocols
    from .model import ModelConfig

    corpus = _make_corpus(cfg)
    folds = synth.speaker_independent_folds(corpus, k=5, seed=cfg["seed"])
    train_idx, test_idx = folds.split(0)
    data = corpus.to_training_data()
    model = protocols.train_system(
        data.subset(train_idx),
        ModelConfig(state_bits=cfg["bits"], state_dim=cfg["state_dim"],
                    personalized=False, seed=cfg["seed"]),
        _train_config(cfg), _scale(cfg))
    return protocols.evaluate_state_head(model, data.subset(test_idx),
                                         cfg["enrollment_per_spk"])


def run_sweep(cfg: dict, out_dir: Path):
    corpus = _make_corpus(cfg)
    folds = synth.speaker_independent_folds(corpus, k=5, seed=cfg["seed"])
    report = ev.run_bitwidth_sweep(corpus.to_training_data(),
                                   [folds.split(0)],
                                   bits_list=cfg["bits_list"],
                                   config=_train_config(cfg),
                                   seed=cfg["seed"],
                                   resamples=cfg["resamples"])
    rows = [{k: row[k] for k in ("bits", "state_dim", "capacity_bits", "rho",
                                 "top1", "eer", "mi_bits")}
            for row in report.rows]
    return rows


def run_leakage(cfg: dict, out_dir: Path):
    from . import protocols
    from .model import ModelConfig

    corpus = _make_corpus(cfg)
    folds = synth.speaker_independent_folds(corpus, k=5, seed=cfg["seed"])
    train_idx, test_idx = folds.split(0)
    data = corpus.to_training_data()
    model = protocols.train_system(
        data.subset(train_idx),
        ModelConfig(state_bits=cfg["bits"], state_dim=cfg["state_dim"],
                    personalized=False, seed=cfg["seed"]),
        _train_config(cfg), _scale(cfg))
    test = data.subset(test_idx)
    out = model.embed_windows(test.windows)
    report = {}
    for head, embs in (("state", protocols.state_embeddings(model,
                                                            test.windows)),
                       ("trait", out["z_t"].astype(np.float64))):
        report[head] = ev.leakage_report(
            embs, test.speaker_ids,
            enrollment_per_spk=cfg["enrollment_per_spk"],
            resamples=cfg["resamples"], seed=cfg["seed"]).to_dict()
    return report


def run_privacy_tradeoff(cfg: dict, out_dir: Path):
    from . import protocols

    corpus = _make_corpus(cfg)
    grid = cfg["sigma_grid"]
    return protocols.privacy_tradeoff(
        corpus, seed=cfg["seed"], scale=_scale(cfg), preset=cfg["preset"],
        sigma_grid=tuple(grid) if grid is not None else None)


def run_energy(cfg: dict, out_dir: Path):
    return ev.energy_report(ev.EnergyParams(
        p_active_mw=cfg["p_active_mw"], p_idle_mw=cfg["p_idle_mw"],
        inference_s=cfg["inference_s"], cadence_s=cfg["cadence_s"],
        window_s=cfg["window_s"]))


def run_bench(cfg: dict, out_dir: Path):
    from . import kernels

    spec = kernels.GemmSpec(m=cfg["m"], k=cfg["k"], n=cfg["n"],
                            a_bits=cfg["a_bits"], b_bits=cfg["b_bits"])
    res = kernels.bench_kernel(spec, iters=cfg["iters"], seed=cfg["seed"])
    return {"op_name": res.op_name, "iters": res.iters,
            "ns_per_call": res.ns_per_call, "checksum": res.checksum,
            "bytes_weights": res.bytes_weights,
            "m": spec.m, "k": spec.k, "n": spec.n,
            "a_bits": spec.a_bits, "b_bits": spec.b_bits}


RUNNERS = {
    "synth": run_synth,
    "pretrain": run_pretrain,
    "train": run_train,
    "eval": run_eval,
    "sweep": run_sweep,
    "leakage": run_leakage,
    "privacy-tradeoff": run_privacy_tradeoff,
    "energy": run_energy,
    "bench": run_bench,
}

#: commands whose natural report shape is rows (CSV-friendly by default)
_SWEEP_COLUMNS = ["bits", "state_dim", "capacity_bits", "rho", "top1", "eer",
                  "mi_bits"]


def _parse_set(values: list) -> dict:
    """Parse repeated --set key=value overrides; values are JSON literals
    where they parse, bare strings otherwise."""
    overrides = {}
    for item in values:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"expected key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpib",
        description="Dual-head mixed-precision embedding experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=str, default=None,
                         help="JSON config file; flags override its values")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", type=str, default=None,
                         help="output directory (default: current)")
        cmd.add_argument("--format", type=str, default=None,
                         choices=("json", "csv"))
        cmd.add_argument("--set", action="append", default=[],
                         metavar="KEY=VALUE", dest="set_overrides",
                         help="override any config key (repeatable)")
    return parser


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command

    file_config = None
    if args.config:
        try:
            file_config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"config error: cannot read {args.config}: {exc}",
                  file=sys.stderr)
            return EXIT_CONFIG
        if not isinstance(file_config, dict):
            print("config error: config file must hold a JSON object",
                  file=sys.stderr)
            return EXIT_CONFIG

    try:
        overrides = _parse_set(args.set_overrides)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    flag_values = {"seed": args.seed, "out": args.out, "format": args.format}
    overrides.update({k: v for k, v in flag_values.items() if v is not None})

    cfg = resolve_config(command, file_config, overrides)
    errors = validate_config(command, cfg)
    cap = os.environ.get("MPIB_THREADS")
    if cap is not None and (not cap.isdigit() or int(cap) < 1):
        errors.append(f"MPIB_THREADS: must be a positive integer (got {cap!r})")
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(cfg["out"])
    try:
        _thread_cap()
        results = RUNNERS[command](cfg, out_dir)
        report = emit_report(
            results, out_dir / f"{command.replace('-', '_')}_report"
                               f".{cfg['format']}",
            command=command, cfg=cfg, fmt=cfg["format"],
            columns=_SWEEP_COLUMNS if command == "sweep" else None)
    except Exception as exc:  # noqa: BLE001 — runtime contract is exit 1
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
