"""Command-line surface: craft, train-eval, transfer, sweep, report,
export-perturbation.

Every command reads a JSON config document (--config), with individual flags
overriding config fields. The fully resolved config hashes to a 12-hex-digit
identifier embedded in all output artifacts, so re-running a command with the
same config is byte-idempotent. Errors print one machine-readable JSON object
to stderr; exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.

Dataset blocks look like
    {"source": "blobs", "num_classes": 4, "height": 32,
     "train_per_class": 64, "test_per_class": 32, "seed": 7}
or
    {"source": "cifar10", "data_dir": null, "train_per_class": 300,
     "test_per_class": 100, "seed": 7}
where a null cifar10 data_dir falls back to the PB_DATA_DIR environment
variable.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, models, poisons
from .data import load_cifar10, read_poison_pack, subsample, synth_blobs, write_poison_pack
from .errors import ConfigError, DataError, NumericError

EPS_DEFAULT = 8.0 / 255.0
GENERATORS = ("regions", "lowfreq", "errmax_pgd", "errmax_mifgsm", "errmin")

# Output-location keys are excluded from the config hash so the identifier
# names the experiment, not where its files land.
_NON_HASH_KEYS = {"out", "out_dir", "ledger", "save_model"}


def config_hash(cfg):
    trimmed = {k: v for k, v in cfg.items() if k not in _NON_HASH_KEYS}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _require(cfg, key, kind="missing_field"):
    if key not in cfg or cfg[key] is None:
        raise ConfigError(f"config field '{key}' is required", kind=kind)
    return cfg[key]


# ---------------------------------------------------------------------------
# dataset / model resolution
# ---------------------------------------------------------------------------


def resolve_dataset(dcfg):
    """Build (train, test) datasets from a dataset config block."""
    if not isinstance(dcfg, dict):
        raise ConfigError("'dataset' must be a JSON object")
    source = dcfg.get("source", "blobs")
    seed = int(dcfg.get("seed", 0))
    if source == "blobs":
        k = int(dcfg.get("num_classes", 4))
        h = int(dcfg.get("height", 32))
        train_pc = int(dcfg.get("train_per_class", 64))
        test_pc = int(dcfg.get("test_per_class", 32))
        train = synth_blobs(train_pc, k, height=h, seed=seed)
        test = synth_blobs(test_pc, k, height=h, seed=seed + 7919)
        return train, test
    if source == "cifar10":
        root = dcfg.get("data_dir") or os.environ.get("PB_DATA_DIR")
        if not root:
            raise DataError("cifar10 dataset needs data_dir or PB_DATA_DIR")
        full_train, full_test = load_cifar10(root)
        train_pc = dcfg.get("train_per_class")
        test_pc = dcfg.get("test_per_class")
        train = subsample(full_train, int(train_pc), seed) if train_pc else full_train
        test = subsample(full_test, int(test_pc), seed + 1) if test_pc else full_test
        return train, test
    raise ConfigError(f"unknown dataset source '{source}'", kind="unknown_dataset")


def resolve_model(mcfg, train_ds, test_ds):
    """A model for crafting or victimhood: load a checkpoint or train fresh."""
    if not isinstance(mcfg, dict):
        raise ConfigError("model block must be a JSON object")
    if mcfg.get("model_path"):
        c, h, w = train_ds.image_shape
        model = models.load_model(mcfg["model_path"], in_shape=(c, h, w),
                                  num_classes=train_ds.num_classes)
        return model, None
    arch = models.get_arch(mcfg.get("arch", "cnn-a"), in_shape=train_ds.image_shape,
                           num_classes=train_ds.num_classes)
    model = models.build_model(arch, seed=int(mcfg.get("seed", 0)))
    tcfg = harness.TrainConfig(**mcfg.get("train", {}))
    report = harness.train(model, train_ds, test_ds, tcfg)
    model.eval()
    return model, report


def _attack_config(cfg, epsilon, momentum_mu):
    acfg = dict(cfg.get("attack", {}))
    acfg.setdefault("epsilon", epsilon)
    acfg.setdefault("targeted", True)
    if momentum_mu is not None:
        acfg["momentum_mu"] = momentum_mu
    acfg.setdefault("steps", 20)
    return poisons.AttackConfig(**acfg)


# ---------------------------------------------------------------------------
# craft
# ---------------------------------------------------------------------------


def cmd_craft(cfg):
    gen = _require(cfg, "generator")
    if gen not in GENERATORS:
        raise ConfigError(f"unknown generator '{gen}' (have {', '.join(GENERATORS)})",
                          kind="unknown_generator")
    out = Path(_require(cfg, "out"))
    seed = int(cfg.get("seed", 0))
    epsilon = float(cfg.get("epsilon", EPS_DEFAULT))
    h = config_hash(cfg)

    if gen == "regions":
        k = int(cfg.get("num_classes", 10))
        height = int(cfg.get("height", 32))
        pack = poisons.gen_regions_noise(int(_require(cfg, "n_regions")), k, epsilon,
                                         seed, height=height)
    elif gen == "lowfreq":
        k = int(cfg.get("num_classes", 10))
        height = int(cfg.get("height", 32))
        pack = poisons.gen_lowfreq_noise(int(_require(cfg, "n_freq")), k, epsilon,
                                         seed, height=height)
    elif gen in ("errmax_pgd", "errmax_mifgsm"):
        train_ds, test_ds = resolve_dataset(_require(cfg, "dataset"))
        mu = None if "attack" in cfg and "momentum_mu" in cfg["attack"] else (
            0.0 if gen == "errmax_pgd" else 1.0)
        acfg = _attack_config(cfg, epsilon, mu)
        if gen == "errmax_pgd" and acfg.momentum_mu != 0:
            raise ConfigError("errmax_pgd requires momentum_mu == 0")
        if gen == "errmax_mifgsm" and acfg.momentum_mu <= 0:
            raise ConfigError("errmax_mifgsm requires momentum_mu > 0")
        model, _ = resolve_model(cfg.get("crafting", {}), train_ds, test_ds)
        pack = poisons.craft_errmax_poison(model, train_ds, acfg)
    else:  # errmin
        train_ds, test_ds = resolve_dataset(_require(cfg, "dataset"))
        ecfg_raw = dict(cfg.get("errmin", {}))
        arch_name = ecfg_raw.pop("arch", "cnn-a")
        noise_raw = dict(ecfg_raw.pop("noise_pgd", {}))
        noise_raw.setdefault("epsilon", epsilon)
        noise_raw.setdefault("steps", 20)
        noise_raw.setdefault("targeted", False)
        ecfg = poisons.ErrMinConfig(noise_pgd=poisons.AttackConfig(**noise_raw), **ecfg_raw)
        arch = models.get_arch(arch_name, in_shape=train_ds.image_shape,
                               num_classes=train_ds.num_classes)
        result = poisons.craft_errmin_poison(train_ds, ecfg, arch, seed)
        pack = result.pack
    pack.source = f"{pack.source};cfg={h}"
    pack.validate()

    out.parent.mkdir(parents=True, exist_ok=True)
    write_poison_pack(pack, out)
    manifest = {
        "pack": out.name,
        "config_hash": h,
        "provenance": pack.source,
        "mode": pack.mode,
        "epsilon": pack.epsilon,
        "m": pack.m,
    }
    with open(out.with_suffix(out.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"pack": str(out), "config_hash": h}))
    return 0


# ---------------------------------------------------------------------------
# train-eval
# ---------------------------------------------------------------------------


def run_train_eval(cfg):
    """Train on (optionally poisoned) data, write curve CSV and summary JSON,
    and return the summary row. Shared by train-eval and sweep."""
    train_ds, test_ds = resolve_dataset(_require(cfg, "dataset"))
    h = config_hash(cfg)
    poison_id = cfg.get("poison_id", "clean")

    if cfg.get("pack"):
        pack = read_poison_pack(cfg["pack"])
        if poison_id == "clean":
            poison_id = pack.source.split(";", 1)[0]
        train_ds = poisons.apply_poison(train_ds, pack)

    arch = models.get_arch(cfg.get("arch", "cnn-a"), in_shape=train_ds.image_shape,
                           num_classes=train_ds.num_classes)
    model = models.build_model(arch, seed=int(cfg.get("model_seed", 0)))
    tcfg = harness.TrainConfig(**cfg.get("train", {}))
    report = harness.train(model, train_ds, test_ds, tcfg, poison_id=poison_id)

    out_dir = Path(cfg.get("out_dir", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    harness.write_report_csv(report, out_dir / f"curve-{h}.csv")
    summary = harness.summarize(report, h)
    harness.write_summary_json(summary, out_dir / f"summary-{h}.json")
    if cfg.get("save_model"):
        model.eval()
        models.save_model(model, cfg["save_model"])
    return summary


def _ledger_upsert(path, rows):
    """Keyed by config hash: replacing a row keeps replays byte-identical."""
    path = Path(path)
    existing = []
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            existing = [json.loads(line) for line in fh if line.strip()]
    by_hash = {r["config_hash"]: r for r in existing}
    for row in rows:
        by_hash[row["config_hash"]] = row
    ordered = sorted(by_hash.values(), key=lambda r: (r["poison_id"], r["config_hash"]))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in ordered:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_train_eval(cfg):
    summary = run_train_eval(cfg)
    ledger = cfg.get("ledger") or str(Path(cfg.get("out_dir", "runs")) / "ledger.jsonl")
    _ledger_upsert(ledger, [summary])
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def cmd_transfer(cfg):
    pack = read_poison_pack(_require(cfg, "pack"))
    train_ds, test_ds = resolve_dataset(_require(cfg, "dataset"))
    victim, _ = resolve_model(_require(cfg, "victim"), train_ds, test_ds)
    rate = harness.transferability(pack, train_ds, victim)
    h = config_hash(cfg)
    result = {"transferability": rate, "pack": pack.source, "config_hash": h}
    out = cfg.get("out")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(cfg):
    runs = _require(cfg, "runs")
    if not isinstance(runs, list) or not runs:
        raise ConfigError("'runs' must be a non-empty list of train-eval configs")
    workers = int(cfg.get("workers", 1))
    ledger = cfg.get("ledger") or str(Path(cfg.get("out_dir", "runs")) / "ledger.jsonl")
    for run in runs:
        run.setdefault("out_dir", cfg.get("out_dir", "runs"))
    if workers <= 1:
        summaries = [run_train_eval(run) for run in runs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(run_train_eval, runs))
    _ledger_upsert(ledger, summaries)
    print(json.dumps({"runs": len(summaries), "ledger": ledger}))
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(cfg):
    ledger = Path(_require(cfg, "ledger"))
    if not ledger.exists():
        raise DataError(f"ledger not found: {ledger}")
    with open(ledger, "r", encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if len(rows) < 3:
        raise DataError(f"report needs >= 3 completed runs, ledger has {len(rows)}")
    out_dir = Path(cfg.get("out_dir", "report"))
    out_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)

    included = [r for r in rows if r.get("epochs_to_threshold") is not None]
    excluded = [r["poison_id"] for r in rows if r.get("epochs_to_threshold") is None]

    speed_lines = ["poison_id,config_hash,epochs_to_threshold,peak_test_acc"]
    for r in included:
        speed_lines.append(f"{r['poison_id']},{r['config_hash']},"
                           f"{r['epochs_to_threshold']},{r['peak_test_acc']:.6f}")
    with open(out_dir / f"speed_vs_peak-{h}.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(speed_lines) + "\n")

    final_lines = ["poison_id,config_hash,final_test_acc,peak_test_acc"]
    for r in rows:
        final_lines.append(f"{r['poison_id']},{r['config_hash']},"
                           f"{r['final_test_acc']:.6f},{r['peak_test_acc']:.6f}")
    with open(out_dir / f"final_vs_peak-{h}.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(final_lines) + "\n")

    # The speed-vs-peak correlation is only meaningful when every run crossed
    # the loss threshold; otherwise it is refused and the offenders listed.
    if excluded:
        rho = None
        note = "correlation refused: some runs never reached the loss threshold"
    else:
        rho = harness.spearman_rho([r["epochs_to_threshold"] for r in included],
                                   [r["peak_test_acc"] for r in included])
        note = None
    report = {
        "config_hash": h,
        "runs": len(rows),
        "spearman_rho_speed_vs_peak": rho,
        "excluded_runs": excluded,
        "note": note,
    }
    with open(out_dir / f"report-{h}.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# export-perturbation
# ---------------------------------------------------------------------------


def export_ppm(delta, path, comment):
    """Min-max normalized delta as binary PPM (P6, maxval 255, round-half-up).

    A constant delta maps to mid-gray (byte 128)."""
    lo, hi = float(delta.min()), float(delta.max())
    if hi > lo:
        norm = (delta.astype(np.float64) - lo) / (hi - lo)
    else:
        norm = np.full(delta.shape, 0.5)
    rgb = np.floor(norm * 255.0 + 0.5).astype(np.uint8)
    c, h, w = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n")
        fh.write(f"# {comment}\n".encode("ascii"))
        fh.write(f"{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.transpose(1, 2, 0).tobytes())


def cmd_export_perturbation(cfg):
    pack = read_poison_pack(_require(cfg, "pack"))
    index = int(_require(cfg, "index"))
    out = Path(_require(cfg, "out"))
    if not 0 <= index < pack.m:
        raise DataError(f"index {index} outside pack with m={pack.m}")
    h = config_hash(cfg)
    comment = f"minmax per-image; pack={pack.source}; index={index}; cfg={h}"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_ppm(pack.deltas[index], out, comment)
    print(json.dumps({"ppm": str(out), "config_hash": h}))
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _merge_flags(cfg, args, keys):
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    return cfg


def build_parser():
    p = argparse.ArgumentParser(prog="poisonbench",
                                description="Craft availability poisons and evaluate them "
                                            "with an early-stopping-aware protocol.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("craft", help="generate a poison pack")
    c.add_argument("--config")
    c.add_argument("--gen", dest="generator")
    c.add_argument("--out")
    c.add_argument("--seed", type=int)
    c.add_argument("--epsilon", type=float)
    c.add_argument("--n-regions", dest="n_regions", type=int)
    c.add_argument("--n-freq", dest="n_freq", type=int)
    c.add_argument("--num-classes", dest="num_classes", type=int)
    c.add_argument("--height", type=int)
    c.set_defaults(func=cmd_craft,
                   flags=["generator", "out", "seed", "epsilon", "n_regions", "n_freq",
                          "num_classes", "height"])

    t = sub.add_parser("train-eval", help="train a victim and log the curves")
    t.add_argument("--config")
    t.add_argument("--pack")
    t.add_argument("--out-dir", dest="out_dir")
    t.add_argument("--arch")
    t.add_argument("--model-seed", dest="model_seed", type=int)
    t.add_argument("--poison-id", dest="poison_id")
    t.add_argument("--ledger")
    t.add_argument("--save-model", dest="save_model")
    t.set_defaults(func=cmd_train_eval,
                   flags=["pack", "out_dir", "arch", "model_seed", "poison_id", "ledger",
                          "save_model"])

    x = sub.add_parser("transfer", help="measure victim misclassification of a pack")
    x.add_argument("--config")
    x.add_argument("--pack")
    x.add_argument("--out")
    x.set_defaults(func=cmd_transfer, flags=["pack", "out"])

    s = sub.add_parser("sweep", help="run many train-eval configs")
    s.add_argument("--config")
    s.add_argument("--workers", type=int)
    s.add_argument("--out-dir", dest="out_dir")
    s.add_argument("--ledger")
    s.set_defaults(func=cmd_sweep, flags=["workers", "out_dir", "ledger"])

    r = sub.add_parser("report", help="scatter data and correlation from a ledger")
    r.add_argument("--config")
    r.add_argument("--ledger")
    r.add_argument("--out-dir", dest="out_dir")
    r.set_defaults(func=cmd_report, flags=["ledger", "out_dir"])

    e = sub.add_parser("export-perturbation", help="write one delta as a PPM image")
    e.add_argument("--config")
    e.add_argument("--pack")
    e.add_argument("--index", type=int, help="delta row; the class index for class_wise packs")
    e.add_argument("--out")
    e.set_defaults(func=cmd_export_perturbation, flags=["pack", "index", "out"])
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        cfg = _merge_flags(cfg, args, args.flags)
        code = args.func(cfg)
    except ConfigError as e:
        print(json.dumps({"error": e.kind, "message": str(e)}), file=sys.stderr)
        code = 2
    except DataError as e:
        print(json.dumps({"error": e.kind, "message": str(e)}), file=sys.stderr)
        code = 3
    except NumericError as e:
        print(json.dumps({"error": e.kind, "message": str(e)}), file=sys.stderr)
        code = 4
    except OSError as e:
        print(json.dumps({"error": "io_error", "message": str(e)}), file=sys.stderr)
        code = 3
    return code


if __name__ == "__main__":
    sys.exit(main())
