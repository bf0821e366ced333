"""``teformer`` command line: train, evaluate, encode, gradcheck, bench, ablate.

Exit codes: 0 success, 2 configuration or parse error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import difflib
import hashlib
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import KINDS as ATTENTION_KINDS
from .attention import AttentionKind, AttentionLayer
from .data import (Dataset, OrderTaskSpec, downsample, gen_order_task, load_dataset, load_mnist_dir,
                   read_idx_images)
from .encoders import KINDS as ENCODER_KINDS
from .encoders import EncodingSpec, encode, encoding_stats
from .errors import ConfigError, ContractError, NumericError, TeformerError
from .model import ABLATIONS, Model, ModelConfig, configure_ablation
from .neurons import LifParams, broken_surrogate
from .training import TrainConfig, evaluate, gradcheck_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger("teformer")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DATA_DEFAULTS = {
    "dataset": "order",      # order | mnist | cache
    "data_dir": None,        # IDX directory (mnist) or dataset cache (cache)
    "n_train": 2000,
    "n_test": 500,
    "downsample": 1,
    "ablation": None,
}
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
VALID_KEYS = MODEL_KEYS | TRAIN_KEYS | set(DATA_DEFAULTS)

SUITES = {
    "table4": ["baseline", "+tmlp", "+tea", "full"],
    "table5": ["full", "tea_bwd+tmlp_fwd", "tea_bwd+tmlp_bwd", "tea_fwd+tmlp_fwd"],
}
SUITE_SEEDS = (1, 2, 3)


# -- configuration ---------------------------------------------------------------


def nearest_key(key: str) -> str | None:
    match = difflib.get_close_matches(key, sorted(VALID_KEYS), n=1, cutoff=0.0)
    return match[0] if match else None


def check_keys(d: dict):
    for key in d:
        if key not in VALID_KEYS:
            raise ConfigError(f"unknown config key {key!r}; nearest valid key is {nearest_key(key)!r}", field=key)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path=None, overrides=None) -> dict:
    """File values first, then flag overrides; returns one flat dict over all known keys."""
    raw = {}
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{config_path}: top level must be a JSON object")
    check_keys(raw)
    merged = {**raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    check_keys(merged)
    out = dict(DATA_DEFAULTS)
    out.update(ModelConfig().to_dict())
    out.update(TrainConfig().to_dict())
    out.update(merged)
    return out


def split_config(d: dict) -> tuple[ModelConfig, TrainConfig]:
    model = ModelConfig.from_dict({k: d[k] for k in MODEL_KEYS if k in d})
    if d.get("ablation"):
        model = configure_ablation(model, d["ablation"])
    return model, TrainConfig.from_dict({k: d[k] for k in TRAIN_KEYS if k in d})


def config_hash(d: dict) -> str:
    """Git-style blob hash of the canonical JSON form."""
    body = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def prepare_output(path, force: bool) -> Path:
    out = Path(path)
    occupied = any(out.iterdir()) if out.is_dir() else out.exists()
    if occupied and not force:
        raise ConfigError(f"output {out} already exists; pass --force to overwrite", field="output")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, cfg: dict):
    digest = config_hash(cfg)
    (out / "config.json").write_text(json.dumps({"config": cfg, "config_hash": digest}, indent=2, sort_keys=True))
    return digest


# -- datasets ----------------------------------------------------------------------


def load_data(cfg: dict) -> tuple[Dataset, Dataset]:
    kind = cfg["dataset"]
    if kind == "order":
        spec = OrderTaskSpec(T=cfg["T"], height=cfg["height"], width=cfg["width"], n_samples=cfg["n_train"],
                             seed=cfg["seed"])
        test = dataclasses.replace(spec, n_samples=cfg["n_test"], seed=cfg["seed"] + 100)
        return gen_order_task(spec, "train"), gen_order_task(test, "test")
    if cfg["data_dir"] is None:
        raise ConfigError(f"dataset {kind!r} needs data_dir", field="data_dir")
    path = Path(cfg["data_dir"])
    if not path.exists():
        raise ConfigError(f"data_dir {path} does not exist", field="data_dir")
    if kind == "mnist":
        tr, te = load_mnist_dir(path, "train"), load_mnist_dir(path, "test")
        tr, te = tr.subset(np.arange(min(cfg["n_train"], len(tr)))), te.subset(np.arange(min(cfg["n_test"], len(te))))
        if cfg["downsample"] > 1:
            tr, te = downsample(tr, cfg["downsample"]), downsample(te, cfg["downsample"])
        return tr, te
    if kind == "cache":
        return load_dataset(path / "train"), load_dataset(path / "test")
    raise ConfigError(f"unknown dataset {kind!r}; expected order, mnist or cache", field="dataset")


# -- subcommands -------------------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    for key in ("seed", "epochs", "lr", "batch_size", "ablation", "dataset", "data_dir"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    model_cfg, train_cfg = split_config(cfg)
    train_data, test_data = load_data(cfg)
    out = prepare_output(args.output, args.force)
    digest = write_manifest(out, cfg)
    handler = logging.FileHandler(out / "train.log", mode="w")
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        log.info("config %s", digest)
        model = Model(model_cfg)
        history = train(model, train_data, test_data, train_cfg, metrics_path=out / "metrics.csv",
                        checkpoint_dir=out / "checkpoints" if args.checkpoint_every_epoch else None)
    finally:
        log.removeHandler(handler)
        handler.close()
    last = history[-1]
    save_checkpoint(model, out / "checkpoints" / "final", epoch=last["epoch"],
                    metrics={k: v for k, v in last.items() if k != "tea_alpha_trace"})
    print(json.dumps({"train_top1": last["train_top1"], "eval_top1": last.get("eval_top1"),
                      "tea_alpha": last["tea_alpha"], "output": str(out)}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args.config, _overrides(args))
    cfg.update({k: v for k, v in model.config.to_dict().items()})
    _, test_data = load_data(cfg)
    result = evaluate(model, test_data)
    text = json.dumps(result, indent=2)
    if args.output:
        out = Path(args.output)
        if out.exists() and not args.force:
            raise ConfigError(f"output {out} already exists; pass --force to overwrite", field="output")
        out.write_text(text)
    print(text)
    return EXIT_OK


def cmd_encode(args) -> int:
    if args.kind not in ENCODER_KINDS:
        raise ConfigError(f"unknown encoder kind {args.kind!r}; expected one of {list(ENCODER_KINDS)}", field="kind")
    images = read_idx_images(args.input)
    if args.limit:
        images = images[:args.limit]
    x = (images.astype(np.float32) / 255.0)[:, None]
    out = prepare_output(args.output, args.force)
    spec = EncodingSpec(args.kind, args.T, args.seed)
    spikes = encode(x, spec)
    np.ascontiguousarray(spikes, dtype="<f4").tofile(out / "spikes.bin")
    manifest = {"kind": args.kind, "T": args.T, "seed": args.seed, "shape": list(spikes.shape),
                "dtype": "float32-le", "source": str(args.input)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    stats = encoding_stats(spikes, x, args.kind)
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    print(json.dumps({k: v for k, v in stats.items() if k != "per_step_rate"}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import toy_gradcheck_config

    cfg = toy_gradcheck_config().to_dict()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        check_keys(raw)
        cfg.update({k: v for k, v in raw.items() if k in MODEL_KEYS})
    config = ModelConfig.from_dict(cfg)
    if config.neuron_mode != "relaxed":
        raise ConfigError("gradcheck needs neuron_mode='relaxed'", field="neuron_mode")
    if args.broken_surrogate:
        with broken_surrogate(0.5):
            report = gradcheck_model(config, seed=args.seed)
    else:
        report = gradcheck_model(config, seed=args.seed)
    width = max(len(n) for n in report.per_param)
    print(f"{'parameter':<{width}}  max_rel_err")
    for name, err in report.per_param.items():
        print(f"{name:<{width}}  {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max relative error {report.max_rel_err:.3e} -> {verdict}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def bench_attention(kind: str, tokens, T=4, dim=32, batch=1, trials=5, warmup=1, seed=0) -> list[dict]:
    rng = np.random.default_rng(seed)
    layer = AttentionLayer(f"bench.{kind}", dim, AttentionKind(kind), rng, LifParams())
    layer.eval()
    rows = []
    for n in tokens:
        x = (rng.random((T, batch, n, dim)) < 0.2).astype(np.float32)
        times = []
        with nx.no_grad():
            for i in range(warmup + trials):
                t0 = time.perf_counter()
                layer(nx.Tensor(x))
                if i >= warmup:
                    times.append((time.perf_counter() - t0) * 1e3)
        rows.append({"kind": kind, "N": n, "T": T, "median_ms": statistics.median(times)})
    return rows


def cmd_bench(args) -> int:
    kinds = [k.strip() for k in args.attention.split(",")]
    for k in kinds:
        if k not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {k!r}; expected one of {list(ATTENTION_KINDS)}", field="attention")
    tokens = [int(v) for v in args.tokens.split(",")]
    rows = []
    for k in kinds:
        rows += bench_attention(k, tokens, T=args.T, dim=args.dim, batch=args.batch, trials=args.trials)
    if args.output:
        out = Path(args.output)
        if out.exists() and not args.force:
            raise ConfigError(f"output {out} already exists; pass --force to overwrite", field="output")
        fh = out.open("w", newline="")
    else:
        fh = sys.stdout
    writer = csv.DictWriter(fh, fieldnames=["kind", "N", "T", "median_ms"])
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "median_ms": f"{r['median_ms']:.4f}"})
    if fh is not sys.stdout:
        fh.close()
    return EXIT_OK


def _run_variant(cfg: dict, variant: str, seed: int) -> dict:
    cfg = {**cfg, "ablation": variant, "seed": seed, "encoding_seed": seed}
    model_cfg, train_cfg = split_config(cfg)
    train_data, test_data = load_data(cfg)
    model = Model(model_cfg)
    history = train(model, train_data, test_data, train_cfg)
    return {"variant": variant, "seed": seed, "top1": history[-1]["eval_top1"], "tea_alpha": model.tea_alphas()}


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("TEFORMER_THREADS", "1")))
    except ValueError:
        raise ConfigError("TEFORMER_THREADS must be an integer", field="TEFORMER_THREADS") from None


def run_suite(cfg: dict, suite: str, seeds=SUITE_SEEDS, jobs: int = 1) -> list[dict]:
    """Train every variant of ``suite`` for every seed; rows come back in table order."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {list(SUITES)}", field="suite")
    work = [(v, s) for v in SUITES[suite] for s in seeds]
    jobs = min(jobs, max_workers())
    if jobs <= 1:
        runs = [_run_variant(cfg, v, s) for v, s in work]
    else:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            runs = list(pool.map(_run_variant, [cfg] * len(work), *zip(*work)))
    report = []
    for v in SUITES[suite]:
        mine = [r for r in runs if r["variant"] == v]
        acc = [r["top1"] for r in mine]
        alphas = [r["tea_alpha"] for r in mine]
        report.append({
            "variant": v,
            "mean_top1": float(np.mean(acc)),
            "sd_top1": float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0,
            "runs": acc,
            "tea_alpha": [float(np.mean(col)) for col in zip(*alphas)] if alphas and alphas[0] else [],
        })
    return report


def format_report(report) -> str:
    lines = [f"{'variant':<18} {'top1 (mean±sd)':>18}  learned alpha"]
    for r in report:
        alpha = "/".join(f"{a:.3f}" for a in r["tea_alpha"]) or "-"
        lines.append(f"{r['variant']:<18} {100 * r['mean_top1']:>9.2f} ± {100 * r['sd_top1']:<5.2f}  {alpha}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, _overrides(args))
    out = prepare_output(args.output, args.force) if args.output else None
    if out is not None:
        write_manifest(out, cfg)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = run_suite(cfg, args.suite, seeds, jobs=args.jobs)
    text = format_report(report)
    print(text)
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2))
        (out / "report.txt").write_text(text + "\n")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="teformer", description="Spiking transformer with temporal enhancement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(q, output_required=True):
        q.add_argument("--config", type=Path)
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--batch-size", dest="batch_size", type=int)
        q.add_argument("--ablation", choices=sorted(ABLATIONS))
        q.add_argument("--dataset", choices=["order", "mnist", "cache"])
        q.add_argument("--data-dir", dest="data_dir")
        q.add_argument("--output", required=output_required)
        q.add_argument("--force", action="store_true")

    q = sub.add_parser("train", help="train a model")
    run_flags(q)
    q.add_argument("--checkpoint-every-epoch", action="store_true")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    run_flags(q, output_required=False)
    q.add_argument("--checkpoint", required=True)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("encode", help="encode IDX images to spike trains")
    q.add_argument("--kind", required=True)
    q.add_argument("--T", type=int, default=8)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--input", required=True)
    q.add_argument("--limit", type=int)
    q.add_argument("--output", required=True)
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_encode)

    q = sub.add_parser("gradcheck", help="finite-difference check of the relaxed toy model")
    q.add_argument("--config", type=Path)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--broken-surrogate", action="store_true", help="test hook: corrupt surrogate derivatives")
    q.set_defaults(func=cmd_gradcheck)

    q = sub.add_parser("bench", help="time attention forwards against token count")
    q.add_argument("--attention", default="qkta,ssa")
    q.add_argument("--tokens", default="256,512,1024")
    q.add_argument("--trials", type=int, default=5)
    q.add_argument("--T", type=int, default=4)
    q.add_argument("--dim", type=int, default=32)
    q.add_argument("--batch", type=int, default=1)
    q.add_argument("--output")
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_bench)

    q = sub.add_parser("ablate", help="train an ablation suite over seeds")
    run_flags(q, output_required=False)
    q.add_argument("--suite", required=True, choices=sorted(SUITES))
    q.add_argument("--seeds", default=",".join(map(str, SUITE_SEEDS)))
    q.add_argument("--jobs", type=int, default=1, help="parallel variants, capped by TEFORMER_THREADS")
    q.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, TeformerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
