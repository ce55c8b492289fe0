"""Command-line entry point.

    changediff datagen            --config run.ini
    changediff train              --config run.ini [--set key=value ...]
    changediff sample             --config run.ini [--checkpoint DIR] [--split test | --pair A B]
    changediff eval               --candidates captions.tsv [--index LevirCCcaptions.json]
    changediff inspect-schedule   --config run.ini [--output schedule.csv]

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .checkpoint import config_hash, file_hash, load_checkpoint, save_checkpoint
from .datasets import CAPTION_FILE, DataError, export_levir_layout, generate_toy_dataset, load_levir_cc, read_caption_index
from .metrics import evaluate
from .model import CaptionDiffusion
from .sample import SampleOptions, batch_sample
from .schedule import ScheduleError, schedule_table
from .textspace import tokenize
from .train import DivergenceError, set_deterministic, train
from .vision import build_backbone, extract_batch, image_to_tensor, residual_batch

log = logging.getLogger("changediff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _write_manifest(path: Path, command: str, cfg: dict, inputs: dict, **extra) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "inputs": {name: file_hash(p) for name, p in sorted(inputs.items()) if p and Path(p).is_file()},
        **extra,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _backbone(kind: str, weights: str, seed: int):
    if kind != "toy" and weights and not Path(weights).is_file():
        raise DataError(f"backbone weights not found: {weights}")
    return build_backbone(kind, weights or None, seed=seed)


def _backbone_shape(backbone) -> tuple[int, int]:
    size = backbone.input_size
    with torch.no_grad():
        out = extract_batch(torch.zeros(1, 3, size, size), backbone)
    return out.shape[1], out.shape[2]


def _pair_tensors(pairs):
    before, after = zip(*(p.images() for p in pairs))
    return (torch.stack([image_to_tensor(b) for b in before]),
            torch.stack([image_to_tensor(a) for a in after]))


def _residuals(pairs, backbone, batch_size: int = 32) -> torch.Tensor:
    chunks = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            before, after = _pair_tensors(pairs[start:start + batch_size])
            chunks.append(residual_batch(before, after, backbone))
    return torch.cat(chunks)


def cmd_datagen(cfg: dict, args) -> int:
    if cfg["data.kind"] != "toy":
        raise C.ConfigError("datagen only renders the toy dataset (data.kind = toy)")
    root = Path(cfg["data.root"])
    splits = generate_toy_dataset(
        (cfg["data.train_size"], cfg["data.val_size"], cfg["data.test_size"]),
        seed=cfg["data.seed"],
        change_ratio=cfg["data.change_ratio"],
    )
    export_levir_layout(splits, root)
    _write_manifest(root / "manifest.json", "datagen", cfg, {},
                    outputs={CAPTION_FILE: file_hash(root / CAPTION_FILE)})
    log.info("wrote %s", {k: len(v) for k, v in splits.items()})
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    sched = C.schedule_from(cfg)
    tcfg = C.train_from(cfg)
    splits, vocab = load_levir_cc(cfg["data.root"])
    pairs = splits["train"].pairs
    backbone = _backbone(cfg["backbone.kind"], cfg["backbone.weights"], cfg["backbone.seed"])
    hw, channels = _backbone_shape(backbone)
    dcfg = C.denoiser_from(cfg, hw, channels)

    set_deterministic(tcfg.seed, tcfg.deterministic)
    model = CaptionDiffusion(dcfg, len(vocab), tie_rounding=cfg["denoiser.tie_rounding"]).to(tcfg.torch_dtype)
    # one training example per (pair, reference caption)
    owners = [i for i, p in enumerate(pairs) for _ in p.captions]
    ids = torch.tensor([vocab.encode(c, dcfg.seq_len) for p in pairs for c in p.captions])

    residual_fn, extra, idi = None, [], None
    if cfg["backbone.finetune"]:
        backbone.train()
        extra = [p.requires_grad_(True) for p in backbone.parameters()]
        backbone.to(tcfg.torch_dtype)

        def residual_fn(index):
            before, after = _pair_tensors([pairs[owners[i]] for i in index.tolist()])
            return residual_batch(before.to(tcfg.torch_dtype), after.to(tcfg.torch_dtype), backbone)
    else:
        idi = _residuals(pairs, backbone)[torch.tensor(owners)].to(tcfg.torch_dtype)

    run = Path(cfg["paths.run"])
    run.mkdir(parents=True, exist_ok=True)
    ckpt_extra = {
        "backbone": {k: cfg[f"backbone.{k}"] for k in ("kind", "weights", "seed", "finetune")},
        "data_root": cfg["data.root"],
    }

    def checkpoint(step):
        save_checkpoint(run / f"checkpoint-{step}", model, vocab, sched, step, ckpt_extra)

    with open(run / "metrics.jsonl", "w") as fh:
        records = train(model, ids, idi, sched, tcfg, log_file=fh, on_checkpoint=checkpoint,
                        residual_fn=residual_fn, extra_params=extra)
    save_checkpoint(run / "checkpoint", model, vocab, sched, len(records), ckpt_extra)
    if cfg["backbone.finetune"]:
        from safetensors.torch import save_file

        save_file({k: v.contiguous() for k, v in backbone.state_dict().items()},
                  str(run / "checkpoint" / "backbone.safetensors"))
    tail = records[-50:]
    final = {
        "steps": len(records),
        "last": records[-1] if records else None,
        "mean_last_50": {k: float(np.mean([r[k] for r in tail])) for k in ("l_T", "l_mse", "l_round", "total")},
    }
    (run / "metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True))
    (run / "config.ini").write_text(C.dump_config(cfg))
    _write_manifest(run / "manifest.json", "train", cfg,
                    {"caption_index": Path(cfg["data.root"]) / CAPTION_FILE, "backbone_weights": cfg["backbone.weights"]},
                    seed=tcfg.seed, outputs={"weights": file_hash(run / "checkpoint" / "weights.safetensors"),
                                             "metrics.jsonl": file_hash(run / "metrics.jsonl")})
    log.info("trained %d steps; final total loss %.4f", len(records), final["last"]["total"])
    return EXIT_OK


def cmd_sample(cfg: dict, args) -> int:
    ckpt = Path(args.checkpoint or Path(cfg["paths.run"]) / "checkpoint")
    try:
        model, vocab, sched, manifest = load_checkpoint(ckpt)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    bb = manifest.get("backbone", {"kind": cfg["backbone.kind"], "weights": cfg["backbone.weights"], "seed": cfg["backbone.seed"]})
    backbone = _backbone(bb["kind"], bb["weights"], bb["seed"])
    if (ckpt / "backbone.safetensors").is_file():
        from safetensors.torch import load_file

        backbone.load_state_dict(load_file(str(ckpt / "backbone.safetensors")))
    dtype = next(model.parameters()).dtype
    backbone.to(dtype)

    if args.pair:
        from .datasets import CaptionedPair
        from PIL import Image

        pairs = []
        for a, b in args.pair:
            for p in (a, b):
                if not Path(p).is_file():
                    raise DataError(f"image not found: {p}")
            pairs.append(CaptionedPair(Path(a).stem, [["?"]], before=np.asarray(Image.open(a).convert("RGB")),
                                       after=np.asarray(Image.open(b).convert("RGB"))))
        split = "pairs"
    else:
        split = args.split or cfg["sample.split"]
        splits, _ = load_levir_cc(cfg["data.root"])
        pairs = splits[split].pairs
        if not pairs:
            raise DataError(f"split {split!r} is empty")

    seed = cfg["sample.seed"] if args.seed is None else args.seed
    options = SampleOptions(
        strict_paper_variance=args.strict_paper or cfg["sample.strict_paper_variance"],
        clamp=args.clamp or cfg["sample.clamp"],
        trace=bool(args.trace),
    )
    set_deterministic(seed)
    idi = _residuals(pairs, backbone).to(dtype)
    results = batch_sample(model, idi, vocab, sched, seed, [p.pair_id for p in pairs], options,
                           batch_size=cfg["sample.batch_size"])

    out = Path(args.output or Path(cfg["paths.run"]) / f"captions_{split}.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(f"{p.pair_id}\t{r.caption}\n" for p, r in zip(pairs, results)))
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "t", "max_abs", "rms"])
            for p, r in zip(pairs, results):
                for t, mx, rms in r.trace:
                    writer.writerow([p.pair_id, t, repr(mx), repr(rms)])
    _write_manifest(out.with_name(out.name + ".manifest.json"), "sample", cfg,
                    {"weights": ckpt / "weights.safetensors", "caption_index": Path(cfg["data.root"]) / CAPTION_FILE},
                    seed=seed, checkpoint=str(ckpt), split=split, options=vars(options),
                    outputs={out.name: file_hash(out)})
    log.info("wrote %d captions to %s", len(results), out)
    return EXIT_OK


def read_candidates(path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"candidates file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{lineno}: expected 'pair_id<TAB>caption'")
        pair_id, caption = line.split("\t", 1)
        out[pair_id] = tokenize(caption)
    return out


def cmd_eval(cfg: dict, args) -> int:
    index = Path(args.index or Path(cfg["data.root"]) / CAPTION_FILE)
    refs = read_caption_index(index)
    cands = read_candidates(args.candidates)
    missing = [k for k in cands if k not in refs]
    if missing:
        raise DataError(f"{len(missing)} candidate ids absent from {index}, e.g. {missing[:3]}")
    keys = list(cands)
    report = evaluate([cands[k] for k in keys], [refs[k] for k in keys])
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text)
        _write_manifest(Path(args.output + ".manifest.json"), "eval", cfg,
                        {"candidates": args.candidates, "caption_index": index})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect_schedule(cfg: dict, args) -> int:
    sched = C.schedule_from(cfg)
    rows = schedule_table(sched)
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(["t", "alpha", "alpha_bar", "posterior_variance"])
        for t, a, ab, var in rows:
            writer.writerow([t, repr(a), repr(ab), repr(var)])
    finally:
        if args.output:
            fh.close()
    if args.output:
        _write_manifest(Path(args.output + ".manifest.json"), "inspect-schedule", cfg, {})
    return EXIT_OK


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "inspect-schedule": cmd_inspect_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="changediff", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sample":
            p.add_argument("--checkpoint")
            p.add_argument("--split", choices=("train", "val", "test"))
            p.add_argument("--pair", nargs=2, action="append", metavar=("BEFORE", "AFTER"))
            p.add_argument("--seed", type=int)
            p.add_argument("--strict-paper", action="store_true", help="add Sigma(t)*eps instead of sqrt(Sigma(t))*eps")
            p.add_argument("--clamp", action="store_true", help="snap x0 predictions to embedding rows")
            p.add_argument("--trace", help="CSV of per-step latent norms")
            p.add_argument("--output")
        elif name == "eval":
            p.add_argument("--candidates", required=True)
            p.add_argument("--index")
            p.add_argument("--output")
        elif name == "inspect-schedule":
            p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except (C.ConfigError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
