"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bionet as bn
from . import pipeline as pl
from . import shadow as sh
from .enface import enface_pair
from .metrics import ausde, image_fidelity, report_psnr, seg_scores
from .oct_core import OctDataError, boundary_from_mask, load_image, load_labels, load_mask, \
    load_volume, save_image, save_labels, save_mask
from .phantom import PhantomConfig, enface_truth, generate_dataset, generate_volume
from .training import TrainingDivergence

log = logging.getLogger("octchoroid")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _phantom_from_args(args, **extra):
    ph = json.loads(args.phantom_json) if getattr(args, "phantom_json", None) else {}
    ph.update(extra)
    try:
        return PhantomConfig(**ph)
    except TypeError as e:
        raise pl.ConfigError(f"phantom: {e}") from None


def _load_dataset(data_dir, split="train"):
    """(image, targets) pairs of one split of a ``phantom`` dataset directory."""
    d = Path(data_dir)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise OctDataError(f"{d} is not a phantom dataset (no meta.json)")
    meta = json.loads(meta_path.read_text())
    pairs = []
    for e in meta["samples"]:
        if e["split"] != split:
            continue
        i = e["index"]
        pairs.append((load_image(d / f"bscan_{i:05d}.png"),
                      {"layers": load_labels(d / f"layers_{i:05d}.png"),
                       "choroid": load_mask(d / f"choroid_{i:05d}.png")}))
    if not pairs:
        raise OctDataError(f"{d} has no {split} samples")
    return pairs


# -- verbs -----------------------------------------------------------------------------


def cmd_phantom(args):
    if args.volume:
        cfg = _phantom_from_args(args, seed=args.seed, frames=args.frames)
        vol, samples = generate_volume(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        from .oct_core import save_volume
        save_volume(vol, out / "volume.raw")
        t = enface_truth(samples)
        save_mask(out / "shadow_truth.png", t["shadow_mask"])
        save_mask(out / "vessels_truth.png", t["vessel_map"])
        np.savez(out / "truth.npz", **{k: np.asarray(v) for k, v in t.items()})
        for i, s in enumerate(samples):
            save_mask(out / f"choroid_{i:03d}.png", s.choroid_mask)
        print(f"wrote {cfg.frames}-frame phantom volume to {out}")
    else:
        cfg = _phantom_from_args(args, seed=args.seed)
        generate_dataset(cfg, args.n_train, args.n_test, args.out)
        print(f"wrote {args.n_train}+{args.n_test} phantom B-scans to {args.out}")


def cmd_train_biomarker(args):
    pairs = _load_dataset(args.data)
    cfg = replace(bn.BIOMARKER_CONFIG, seed=args.seed,
                  max_epochs=args.epochs or bn.BIOMARKER_CONFIG.max_epochs)
    net, report = bn.train_biomarker_net([p[1]["choroid"] for p in pairs], config=cfg)
    bn.save_biomarker(net, args.out, report)
    print(json.dumps(report))


def cmd_train_bionet(args):
    pairs = _load_dataset(args.data)
    bio = bn.load_biomarker(args.biomarker) if args.biomarker else None
    cfg = bn.bionet_config(args.epochs or bn.BIONET_CONFIG.max_epochs, seed=args.seed)
    if args.checkpoint_dir:
        cfg = replace(cfg, checkpoint_dir=args.checkpoint_dir)
    model, ckpt, rows = bn.train_bionet(pairs, bio, cfg, variant=args.ablation)
    bn.save_bionet(model, args.out, ckpt)
    print(f"{args.ablation}: best epoch {ckpt.epoch}, val dice {rows[ckpt.epoch]['val_dice']:.4f}")


def _phantom_enface(cfg, seeds):
    for s in seeds:
        vol, samples = generate_volume(replace(cfg, seed=s))
        t = enface_truth(samples)
        yield enface_pair(vol, t["choroid_upper"], t["choroid_lower"]), t


def cmd_train_shadow_seg(args):
    if args.rpe:
        if len(args.rpe) != len(args.masks or []):
            raise pl.ConfigError("--rpe and --masks need the same number of files")
        pairs = [(load_image(r), load_mask(m)) for r, m in zip(args.rpe, args.masks)]
    else:
        cfg = _phantom_from_args(args, frames=args.frames)
        pairs = [(ef.rpe, t["shadow_mask"])
                 for ef, t in _phantom_enface(cfg, range(args.seed, args.seed + args.phantoms))]
    model, ckpt, _ = sh.train_shadow_segmenter(pairs, replace(sh.SHADOW_SEG_CONFIG, seed=args.seed))
    sh.save_shadow_segmenter(model, args.out, ckpt)
    print(f"trained shadow segmenter on {len(pairs)} image(s)")


def cmd_train_deshadow(args):
    if args.textures:
        textures = [load_image(p) for p in args.textures]
    else:
        cfg = _phantom_from_args(args, frames=args.frames)
        textures = pl.clean_textures(cfg, range(args.seed, args.seed + args.phantoms))
    model = sh.load_deshadow(args.resume) if args.resume else None
    conf = sh.DeshadowConfig(seed=args.seed)
    if args.steps:
        conf.steps = {**conf.steps, args.stage: args.steps}
    try:
        model, _ = sh.train_deshadow(textures, conf, args.stage, model)
    except ValueError as e:
        raise pl.ConfigError(str(e)) from None
    sh.save_deshadow(model, args.out, conf)
    print(f"stages completed: {', '.join(model.stages_done)}")


def cmd_segment(args):
    vol = load_volume(args.input)
    model = bn.load_bionet(args.model)
    segs = bn.segment_volume(vol, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(segs):
        save_mask(out / f"choroid_{i:03d}.png", s.choroid_mask)
        if s.layer_map is not None:
            save_labels(out / f"layers_{i:03d}.png", s.layer_map)
    pl.write_thickness(out / "thickness.csv", segs, vol.axial_pitch_um)
    empty = sum(s.empty for s in segs)
    print(f"segmented {len(segs)} frames ({empty} empty)")


def _seg_boundaries(seg_dir, frames):
    ups, los = [], []
    for i in range(frames):
        p = Path(seg_dir) / f"choroid_{i:03d}.png"
        if not p.exists():
            raise OctDataError(f"missing segmentation {p}")
        u, l = boundary_from_mask(load_mask(p))
        ups.append(u)
        los.append(l)
    return np.stack(ups), np.stack(los)


def cmd_enface(args):
    vol = load_volume(args.input)
    up, lo = _seg_boundaries(args.seg, vol.frames)
    ef = enface_pair(vol, up, lo)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "rpe.png", ef.rpe)
    save_image(out / "choroid.png", ef.choroid)
    print(f"wrote {ef.rpe.shape[0]}x{ef.rpe.shape[1]} en-face images to {out}")


def cmd_locate_shadows(args):
    model = sh.load_shadow_segmenter(args.model)
    mask, raw = sh.locate_shadows(load_image(args.rpe), model)
    save_mask(args.out, mask)
    if args.raw_out:
        save_mask(args.raw_out, raw)
    print(f"shadow fraction {mask.mean():.3f}")


def cmd_deshadow(args):
    model = sh.load_deshadow(args.model)
    img = load_image(args.choroid)
    try:
        out = sh.eliminate_shadows(img, load_mask(args.mask), model)
    except ValueError as e:
        raise OctDataError(str(e)) from None
    save_image(args.out, out)


def cmd_evaluate_seg(args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    rows = []
    for gp in sorted(gt_dir.glob("choroid_*.png")):
        pp = pred_dir / gp.name
        if not pp.exists():
            raise OctDataError(f"no prediction for {gp.name}")
        p, g = load_mask(pp), load_mask(gp)
        sc = seg_scores(p, g)
        pu, pb = boundary_from_mask(p)
        gu, gb = boundary_from_mask(g)
        rows.append({"sample": gp.stem, "di": sc.di, "iou": sc.iou,
                     "ausde_bm": ausde(pu, gu) if p.any() else "",
                     "ausde_csi": ausde(pb, gb) if p.any() else "",
                     "acc": sc.acc, "sen": sc.sen})
    if not rows:
        raise OctDataError(f"no choroid_*.png masks in {gt_dir}")
    pl.write_csv(args.out, rows)
    print(f"mean DI {np.mean([r['di'] for r in rows]):.4f} over {len(rows)} samples")


def cmd_evaluate_inpaint(args):
    if len(args.pred) != len(args.clean):
        raise pl.ConfigError("--pred and --clean need the same number of files")
    rows = []
    for p, c in zip(args.pred, args.clean):
        s, ps, m = image_fidelity(load_image(p), load_image(c))
        rows.append({"sample": Path(p).stem, "ssim": s, "psnr": report_psnr(ps), "mse": m})
    pl.write_csv(args.out, rows)
    print(f"mean SSIM {np.mean([r['ssim'] for r in rows]):.4f}")


def cmd_pipeline(args):
    out = pl.run_pipeline(args.config, args.out)
    vd = json.loads((out / "vd.json").read_text())
    if vd["original"] is None:
        print(f"run written to {out}; no choroid segmented, vessel density undefined")
    else:
        print(f"run written to {out}; VD original {vd['original']:.4f}, "
              f"deshadowed {vd['deshadowed']:.4f}")


def cmd_ablation(args):
    cfg = _phantom_from_args(args)
    tc = bn.bionet_config(args.epochs or bn.BIONET_CONFIG.max_epochs)
    bio = bn.load_biomarker(args.biomarker) if args.biomarker else None
    medians, _ = pl.ablation_suite(args.out, args.seeds, args.methods, args.n_train,
                                   args.n_test, cfg, tc, bio)
    for r in medians:
        print(f"{r['method']:<10} " + " ".join(f"{k}={r[k]:.4f}" for k in pl.ABLATION_COLUMNS))


# -- parser ------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="octchoroid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def phantom_opts(sp):
        sp.add_argument("--phantom-json", help="JSON object of phantom setting overrides")

    sp = add("phantom", cmd_phantom, "generate a phantom dataset or volume")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-train", type=int, default=200)
    sp.add_argument("--n-test", type=int, default=40)
    sp.add_argument("--volume", action="store_true", help="write one multi-frame volume")
    sp.add_argument("--frames", type=int, default=64)
    phantom_opts(sp)

    sp = add("train-biomarker", cmd_train_biomarker, "train and freeze the thickness regressor")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train-bionet", cmd_train_bionet, "train the choroid segmentation network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--biomarker")
    sp.add_argument("--ablation", choices=sorted(bn.VARIANTS), default="full")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--checkpoint-dir")

    sp = add("train-shadow-seg", cmd_train_shadow_seg, "train the en-face shadow segmenter")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rpe", nargs="*")
    sp.add_argument("--masks", nargs="*")
    sp.add_argument("--phantoms", type=int, default=1)
    sp.add_argument("--frames", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    phantom_opts(sp)

    sp = add("train-deshadow", cmd_train_deshadow, "train one stage of the shadow inpainter")
    sp.add_argument("--stage", choices=sh.STAGES, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint holding the earlier stages")
    sp.add_argument("--textures", nargs="*")
    sp.add_argument("--phantoms", type=int, default=12)
    sp.add_argument("--frames", type=int, default=64)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int, default=0)
    phantom_opts(sp)

    sp = add("segment", cmd_segment, "segment every frame of a volume")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)

    sp = add("enface", cmd_enface, "project en-face RPE and choroid images")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--seg", required=True)
    sp.add_argument("--out", required=True)

    sp = add("locate-shadows", cmd_locate_shadows, "segment and refine vessel shadows")
    sp.add_argument("--rpe", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--raw-out")

    sp = add("deshadow", cmd_deshadow, "inpaint shadowed pixels of an en-face choroid image")
    sp.add_argument("--choroid", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)

    sp = add("evaluate-seg", cmd_evaluate_seg, "score predicted choroid masks")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", default="scores.csv")

    sp = add("evaluate-inpaint", cmd_evaluate_inpaint, "SSIM/PSNR/MSE against clean images")
    sp.add_argument("--pred", nargs="+", required=True)
    sp.add_argument("--clean", nargs="+", required=True)
    sp.add_argument("--out", default="fidelity.csv")

    sp = add("pipeline", cmd_pipeline, "run all stages from a config or manifest")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")

    sp = add("ablation", cmd_ablation, "train and compare the segmentation ablations")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--methods", nargs="+", choices=pl.ABLATION_METHODS,
                    default=list(pl.ABLATION_METHODS))
    sp.add_argument("--n-train", type=int, default=200)
    sp.add_argument("--n-test", type=int, default=40)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--biomarker")
    phantom_opts(sp)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except pl.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OctDataError, FileNotFoundError, bn.FrozenModelError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as e:
        print(f"config error: bad JSON ({e})", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
