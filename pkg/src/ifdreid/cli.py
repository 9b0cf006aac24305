"""Command-line entry point: ``ifdreid {generate,train,eval,ablate,dump-attention}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error or missing config.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, load_config
from .errors import ConfigError
from .evaluation import MODES, EvalResult
from .network import VARIANTS, network_from_checkpoint
from .pipeline import Splits, attention_maps, evaluate_model, evaluate_records, load_splits, oracle_records, tensors_for
from .synthdata import generate_split
from .training import MetricsLog, init_state, load_state, save_state, train_phase1, train_phase2

logger = logging.getLogger("ifdreid")

ABLATION_ORDER = ("baseline", "ikt", "cbd", "ifd-cl", "ifd")
MODE_CHOICES = {"general": ("general",), "sc": ("same-clothing",), "cc": ("clothing-change",), "all": MODES}


class UsageError(Exception):
    pass


def _config(args, extra: list[str] | None = None) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        extra = list(extra or [])
        if args.command == "generate":
            extra.append(f"synth.seed={args.seed}")
        else:
            extra += [f"train.seed={args.seed}", f"sampler.seed={args.seed}"]
    if getattr(args, "variant", None):
        if args.variant not in VARIANTS:
            raise UsageError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
        overrides.append(f"train.variant={args.variant}")
    if getattr(args, "epochs", None):
        overrides += [f"train.phase1_epochs={args.epochs[0]}", f"train.phase2_epochs={args.epochs[1]}"]
    return load_config(args.config, overrides + list(extra or []))


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(config: RunConfig, out: Path) -> None:
    config.dump(out / "config.yaml")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _result_block(result: EvalResult | str, mode: str) -> dict:
    if isinstance(result, str):
        return {"mode": mode, "error": result}
    return result.to_dict()


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    config = _config(args)
    out = Path(args.out) if args.out else Path(config.data.root)
    paths = generate_split(config.synth, out)
    _echo(config, out)
    for p in paths:
        print(p)
    return 0


def _train_one(config: RunConfig, splits: Splits, out: Path, resume: str | None = None):
    out.mkdir(parents=True, exist_ok=True)
    data = tensors_for(splits.train, config, splits.vocab)
    state = load_state(resume, config) if resume else init_state(config, len(data.id_list))
    log = MetricsLog(out / "metrics.tsv")
    state = train_phase1(state, config, splits.train, data, log)
    if state.model.has_attention and config.train.phase1_epochs > 0:
        save_state(state, out / "phase1.ckpt", config)
    state = train_phase2(state, config, splits.train, data, log)
    save_state(state, out / "model.ckpt", config)
    _echo(config, out)
    return state


def cmd_train(args) -> int:
    config = _config(args)
    out = _outdir(args)
    splits = load_splits(config)
    state = _train_one(config, splits, out, args.resume)
    print(out / "model.ckpt")
    logger.info("finished %s after %d steps", config.train.variant, state.step)
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    out = _outdir(args)
    splits = load_splits(config)
    modes = MODE_CHOICES[args.mode]
    if args.oracle:
        ids = sorted({s.identity for s in splits.query} | {s.identity for s in splits.gallery})
        results = evaluate_records(oracle_records(splits.query, ids), oracle_records(splits.gallery, ids), modes)
        source = "oracle"
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
        if not ckpt.is_file():
            raise UsageError(f"checkpoint not found: {ckpt}")
        model, _ = network_from_checkpoint(ckpt)
        results = evaluate_model(model, config, splits, modes)
        source = str(ckpt)
    payload = {
        "source": source,
        "config_hash": config.hash(),
        "results": {m: _result_block(r, m) for m, r in zip(modes, results)},
    }
    _echo(config, out)
    _write_json(out / "results.json", payload)
    for m, r in zip(modes, results):
        print(f"{m}: {r}" if isinstance(r, str) else f"{m}: rank-1 {r.rank(1) * 100:.1f}  mAP {r.mAP * 100:.1f}")
    return 0


def cmd_ablate(args) -> int:
    base = _config(args)
    out = _outdir(args)
    splits = load_splits(base)
    rows = []
    for name in ABLATION_ORDER:
        config = base.with_overrides({"train.variant": name})
        state = _train_one(config, splits, out / name)
        results = evaluate_model(state.model, config, splits, MODES)
        blocks = {m: _result_block(r, m) for m, r in zip(MODES, results)}
        rows.append({"variant": name, "seed": config.train.seed, "config_hash": config.hash(), "results": blocks})
        cc = blocks["clothing-change"]
        logger.info("%s: cc rank-1 %s", name, cc.get("rank1", cc.get("error")))
    _echo(base, out)
    _write_json(out / "ablation.json", {"rows": rows})
    lines = ["variant\tseed\tconfig_hash\tcc_rank1\tcc_mAP\tgeneral_rank1\tgeneral_mAP"]
    for row in rows:
        cells = [row["variant"], str(row["seed"]), row["config_hash"]]
        for m in ("clothing-change", "general"):
            b = row["results"][m]
            cells += [f"{b['rank1'] * 100:.2f}", f"{b['mAP'] * 100:.2f}"] if "rank1" in b else ["-", "-"]
        lines.append("\t".join(cells))
    table = "\n".join(lines) + "\n"
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def upsample_nearest(amap: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = amap.shape
    H, W = size
    if H % h or W % w:
        raise ValueError(f"map {h}x{w} does not tile image {H}x{W}")
    return np.repeat(np.repeat(amap, H // h, axis=0), W // w, axis=1)


def cmd_dump_attention(args) -> int:
    config = _config(args)
    out = _outdir(args)
    if not args.checkpoint:
        raise UsageError("dump-attention needs --checkpoint")
    model, _ = network_from_checkpoint(args.checkpoint)
    if not model.has_attention:
        raise UsageError(f"variant {model.variant.name!r} has no attention stream")
    splits = load_splits(config)
    index = getattr(splits, args.split)
    data = tensors_for(index, config, splits.vocab)
    maps = attention_maps(model, data.masked).numpy()
    size = tuple(data.images.shape[-2:])
    target = out / "attention"
    target.mkdir(exist_ok=True)
    for k, (amap, (ident, cloth, _)) in enumerate(zip(maps, data.meta)):
        full = upsample_nearest(amap, size)
        pixels = np.clip(np.round(full * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(target / f"{k:04d}_{ident}_{cloth}.png")
    _echo(config, out)
    print(f"{len(maps)} maps in {target}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifdreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
        p.add_argument("--out", default=None if name == "generate" else "out", help="output directory")
        p.add_argument("--seed", type=int)
        if name in ("train", "eval", "dump-attention"):
            p.add_argument("--variant")
        if name in ("train", "ablate"):
            p.add_argument("--epochs", type=int, nargs=2, metavar=("PHASE1", "PHASE2"))
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name in ("eval", "dump-attention"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--mode", choices=sorted(MODE_CHOICES), default="all")
            p.add_argument("--oracle", action="store_true", help="score one-hot identity features instead of a model")
        if name == "dump-attention":
            p.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, UsageError, ConfigError) as exc:
        # missing config files are usage errors; missing data files inside a
        # run surface as LoadError below
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        logger.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
