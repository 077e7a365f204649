"""Batch command-line interface.

Subcommands: gen-data (write a phantom dataset), train (fit a model and
emit a checkpoint plus per-iteration loss CSV), predict (synthesize images
from PGM inputs), eval (PSNR/SSIM report CSV), gradcheck (run the
verification suite). Every command is deterministic given its flags.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import data, metrics, optim, persist, verify
from .model import SynNetModel
from .tensor import RngStream

HISTORY_COLUMNS = ("iter", "epoch", "l2", "ssim", "tv", "wd", "total")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if v == float("inf") else f"{v:.17g}"
    return str(v)


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ValueError(f"bad size syntax {text!r}, expected HxW")


def _load_config(path: str) -> persist.RunConfig:
    with open(path) as f:
        return persist.parse_config(f.read())


def _padded_pairs(samples, cfg, factor):
    pairs = data.training_pairs(samples, cfg.input_modalities, cfg.output_modalities)
    dtype = {"single": np.float32, "double": np.float64}[cfg.dtype]
    out = []
    for inputs, targets in pairs:
        inputs = [data.pad_to_multiple(t.astype(dtype), factor)[0] for t in inputs]
        targets = [data.pad_to_multiple(t.astype(dtype), factor)[0] for t in targets]
        out.append((inputs, targets))
    return out


def _pair_augment(pair, rng):
    tf = data.draw_transform(rng)
    inputs, targets = pair
    return ([data.apply_transform(t, tf).astype(t.dtype) for t in inputs],
            [data.apply_transform(t, tf).astype(t.dtype) for t in targets])


def _write_history(path, history):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(HISTORY_COLUMNS)
        for row in history:
            wr.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])


def cmd_gen_data(args) -> int:
    h, w = _parse_size(args.size)
    manifest = data.write_dataset(args.out, args.count, h, w, args.seed)
    print(f"wrote {len(manifest.sample_ids)} samples ({h}x{w}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    topo = persist.topology_from_config(cfg)
    tcfg = persist.train_config_from_config(cfg)
    model = SynNetModel(topo)

    manifest = data.load_manifest(args.data)
    train_ids, _ = data.split_ids(manifest.sample_ids, cfg.train_frac)
    samples = [data.load_sample(manifest, sid) for sid in train_ids]
    factor = 2 ** topo.depth
    dataset = _padded_pairs(samples, cfg, factor)

    if args.resume:
        cp = persist.load_checkpoint(args.resume)
        params, state, opt_state = persist.unpack_training(cp, cfg.lr, cfg.momentum)
    else:
        params, state = model.init_params(RngStream(cfg.seed).child("init"),
                                          dtype=cfg.dtype)
        opt_state = optim.OptimState(lr=cfg.lr, momentum=cfg.momentum)

    augment_fn = _pair_augment if cfg.augment else None
    params, opt_state, history = optim.train(
        model, params, state, dataset, tcfg, opt_state, augment_fn=augment_fn)

    cp = persist.pack_training(topo, params, state, opt_state,
                               persist.format_config(cfg))
    persist.save_checkpoint(args.out, cp)
    if args.history:
        _write_history(args.history, history)

    # final train-set quality, infer mode
    psnrs, ssims = [], []
    for inputs, targets in dataset:
        preds, _ = model.forward(params, state, inputs, mode="infer")
        for pred, targ in zip(preds, targets):
            psnrs.append(metrics.psnr(pred, targ))
            ssims.append(metrics.ssim_standard(pred, targ))
    print(f"final train PSNR={_fmt(float(np.mean(psnrs)))} dB "
          f"SSIM={_fmt(float(np.mean(ssims)))}")
    return 0


def _restore_model(ckpt_path):
    cp = persist.load_checkpoint(ckpt_path)
    cfg = persist.parse_config(cp.config_text) if cp.config_text else persist.RunConfig()
    params, state, _ = persist.unpack_training(cp, cfg.lr, cfg.momentum)
    return SynNetModel(cp.topology), params, state, cfg


def cmd_predict(args) -> int:
    model, params, state, cfg = _restore_model(args.ckpt)
    topo = model.topology
    in_files = args.input.split(",")
    out_files = args.output.split(",")
    if len(in_files) != topo.in_arms:
        raise ValueError(f"{topo.kind} needs {topo.in_arms} input file(s), got {len(in_files)}")
    if len(out_files) != topo.out_arms:
        raise ValueError(f"{topo.kind} needs {topo.out_arms} output file(s), got {len(out_files)}")
    factor = 2 ** topo.depth
    dtype = {"single": np.float32, "double": np.float64}[cfg.dtype]
    inputs, recs = [], []
    for path in in_files:
        t, rec = data.pad_to_multiple(data.load_pgm(path).astype(dtype), factor)
        inputs.append(t)
        recs.append(rec)
    preds, _ = model.forward(params, state, inputs, mode="infer")
    for pred, path in zip(preds, out_files):
        img = data.crop_back(pred.astype(np.float64), recs[0])
        data.save_pgm(path, np.clip(img, 0.0, 1.0))
        print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    model, params, state, cfg = _restore_model(args.ckpt)
    manifest = data.load_manifest(args.data)
    factor = 2 ** model.topology.depth
    samples = [data.load_sample(manifest, sid) for sid in manifest.sample_ids]
    dataset = _padded_pairs(samples, cfg, factor)
    rows = []
    for sid, (inputs, targets) in zip(manifest.sample_ids, dataset):
        preds, _ = model.forward(params, state, inputs, mode="infer")
        for head, (pred, targ) in enumerate(zip(preds, targets)):
            rows.append((sid, head, metrics.psnr(pred, targ),
                         metrics.ssim_standard(pred, targ)))
    mean_psnr = float(np.mean([r[2] for r in rows]))
    mean_ssim = float(np.mean([r[3] for r in rows]))
    with open(args.report, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("sample_id", "head", "psnr_db", "ssim"))
        for sid, head, p, s in rows:
            wr.writerow((sid, head, _fmt(p), _fmt(s)))
        wr.writerow(("mean", "all", _fmt(mean_psnr), _fmt(mean_ssim)))
    print(f"evaluated {len(rows)} prediction(s): "
          f"mean PSNR={_fmt(mean_psnr)} dB SSIM={_fmt(mean_ssim)}")
    return 0


def cmd_gradcheck(args) -> int:
    results = verify.gradcheck_suite(args.seed)
    print(verify.format_report(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synnet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", required=True, help="HxW, e.g. 64x64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", default=None)
    p.add_argument("--history", default=None, help="per-iteration loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="synthesize images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="PGM file(s), comma separated")
    p.add_argument("--output", required=True, help="PGM file(s), comma separated")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
