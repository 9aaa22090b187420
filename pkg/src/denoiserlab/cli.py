"""Command-line entry point: ``denoiserlab <command> [options]``.

Every command writes into ``--out``, which holds a ``run.json`` manifest with
the fully resolved arguments, plus CSV/JSON/image outputs. Outputs depend only
on the arguments, so reruns are byte-identical. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import data, geometry, imageio, representation, sampler, trainer, unet
from .divergence import DivergenceError, embedding_check
from .seeding import derive_seed

logger = logging.getLogger("denoiserlab")

RUN_MANIFEST_VERSION = 1
DEFAULT_ANALYSIS_SIGMA = representation.DEFAULT_ANALYSIS_SIGMA
CHECKPOINT_NAME = "model.ckpt"

EMBED_SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "n_pairs", "n_used", "n_excluded", "A", "B", "B_over_A",
                 "A_p5", "B_p95", "spearman", "analysis_sigma"],
    "properties": {
        "schema_version": {"const": 1},
        "n_pairs": {"type": "integer", "minimum": 1},
        "n_used": {"type": "integer", "minimum": 1},
        "n_excluded": {"type": "integer", "minimum": 0},
        "A": {"type": "number"},
        "B": {"type": "number"},
        "B_over_A": {"type": ["number", "null"]},
        "A_p5": {"type": "number"},
        "B_p95": {"type": "number"},
        "spearman": {"type": ["number", "null"]},
        "analysis_sigma": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}


class UsageError(Exception):
    pass


class RunLockedError(RuntimeError):
    pass


# helpers ----------------------------------------------------------------------

def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _finite(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


@contextmanager
def _run_dir(out: str):
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{path}: locked by another run (remove {lock} if stale)") from None
    os.close(fd)
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _manifest(path: Path, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    _dump_json(path / "run.json", {"format_version": RUN_MANIFEST_VERSION,
                                   "command": args.command, "args": resolved})


def _load_data(path: str) -> data.Dataset:
    if not Path(path).exists():
        raise UsageError(f"dataset path {path} does not exist")
    return data.load_dataset(path)


def _load_model(path: str) -> tuple[unet.UNetModel, dict]:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    if not p.exists():
        raise UsageError(f"checkpoint {p} does not exist")
    model, _, meta = trainer.load_checkpoint(p)
    return model, meta


def _image_index(ds: data.Dataset, ref: str) -> int:
    """Resolve an index (``17``) or a name; ``img_042`` also matches ``img_00042``."""
    if ref.isdigit():
        i = int(ref)
        if i >= len(ds):
            raise UsageError(f"image index {i} out of range (dataset has {len(ds)})")
        return i
    names = ds.names or []
    if ref in names:
        return names.index(ref)
    stem, _, num = ref.rpartition("_")
    if num.isdigit():
        for i, n in enumerate(names):
            s2, _, n2 = n.rpartition("_")
            if s2 == stem and n2.isdigit() and int(n2) == int(num):
                return i
    raise UsageError(f"no image named {ref!r}")


def _save_images(outdir: Path, stem: str, images: np.ndarray, fmt: str) -> None:
    for i, img in enumerate(images):
        imageio.write_image(outdir / f"{stem}_{i:03d}.{fmt}", imageio.to_uint8(img))


# commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    with _run_dir(args.out) as out:
        if args.from_folder:
            if not Path(args.from_folder).is_dir():
                raise UsageError(f"{args.from_folder} is not a directory")
            ds = data.load_folder(args.from_folder, size=args.size, channels=args.channels)
        else:
            ds = data.gen_textures(args.n, args.size, args.classes, args.seed, args.channels)
        data.save_dataset(ds, out, args.format)
        _manifest(out, args)


def _unet_config(args, ds: data.Dataset) -> unet.UNetConfig:
    return unet.UNetConfig(in_channels=ds.image_shape[0], base_channels=args.base_channels,
                           encoder_blocks=args.encoder_blocks, layers_per_encoder=args.layers_encoder,
                           layers_middle=args.layers_middle, layers_per_decoder=args.layers_decoder,
                           image_size=ds.image_shape[1])


def cmd_train(args) -> None:
    ds = _load_data(args.data)
    heldout = _load_data(args.heldout) if args.heldout else None
    with _run_dir(args.out) as out:
        ckpt = out / CHECKPOINT_NAME
        cfg = trainer.TrainConfig(args.epochs, args.batch_size, args.lr, args.lr_decay_factor,
                                  args.lr_decay_every, data.SigmaRange(args.sigma_min, args.sigma_max),
                                  args.seed)
        log = trainer.LossLog()
        start, state = 0, None
        if args.resume:
            if not ckpt.exists():
                raise UsageError(f"--resume given but {ckpt} does not exist")
            model, state, meta = trainer.load_checkpoint(ckpt)
            log.rows = list(meta.get("loss", []))
            start = meta.get("epochs_done", len(log.rows))
            cfg = trainer.TrainConfig.from_dict({**meta["train_config"], "epochs": args.epochs})
        else:
            try:
                model = unet.build(_unet_config(args, ds), seed=derive_seed(args.seed, "init"))
            except unet.ConfigError as exc:
                raise UsageError(str(exc)) from exc
        model, log, state = trainer.train(model, ds, cfg, heldout, state, log, start)
        meta = {"epochs_done": start + args.epochs, "loss": log.rows, "train_config": cfg.to_dict(),
                "data_mean_image": np.round(ds.mean_image().astype(np.float64), 8).tolist()}
        trainer.save_checkpoint(model, state, ckpt, meta)
        log.to_csv(out / "loss.csv")
        _manifest(out, args)


def cmd_analyze(args) -> None:
    model, _ = _load_model(args.checkpoint)
    ds = _load_data(args.data)
    with _run_dir(args.out) as out:
        kind = args.analysis
        if kind == "sparsity":
            prof = representation.block_sparsity_profile(model, ds, args.sigma, args.seed)
            rows = [(p, lo, hi, c) for p, v in prof.items()
                    for lo, hi, c in representation.histogram_table(v, args.bins)]
            _write_csv(out / "sparsity.csv", ["probe", "bin_lo", "bin_hi", "count"], rows)
            _dump_json(out / "summary.json", {"sigma": args.sigma, "median_pr": {
                p: float(np.median(v)) for p, v in prof.items()}})
        elif kind == "selectivity":
            prof = representation.channel_selectivity(model, ds, args.sigma, args.n_draws, args.seed)
            labels = ds.labels if ds.labels is not None else np.zeros(len(ds), dtype=int)
            rows = []
            for c in range(len(prof.pr)):
                top = [] if prof.dead[c] else representation.top_activating_images(prof, c, min(10, len(ds)))
                purity = float(np.bincount(labels[top]).max() / len(top)) if len(top) else float("nan")
                rows.append((c, prof.pr[c], prof.mean_activation[c], prof.category(c), purity,
                             " ".join(str(i) for i in top)))
            _write_csv(out / "selectivity.csv",
                       ["channel", "pr", "mean_activation", "category", "top10_purity", "top10_ids"], rows)
            _dump_json(out / "summary.json", {
                "sigma": args.sigma, "n_draws": args.n_draws, "threshold": prof.threshold,
                "n_selective": int(len(prof.selective)), "n_common": int(len(prof.common)),
                "n_dead": int(prof.dead.sum())})
        elif kind == "stability":
            grid = args.sigma_grid or list(np.round(np.geomspace(0.02, 1.0, 12), 6))
            rows, summary = [], {}
            for probe in model.probes():
                if model.probe_channels(probe) <= 1:
                    continue
                cos = representation.stability_curve(model, ds.images, args.sigma_ref, grid,
                                                     args.n_draws, probe, args.seed)
                for s, col in zip(grid, cos.T):
                    rows.append((probe.name, float(s), float(col.mean()), float(col.std())))
                summary[probe.name] = float(cos.mean())
            _write_csv(out / "stability.csv", ["probe", "sigma", "mean_cosine", "std_cosine"], rows)
            _dump_json(out / "summary.json", {"sigma_ref": args.sigma_ref, "mean_cosine": summary})
        elif kind == "stats":
            st = representation.channel_stats(model, ds, args.sigma, args.n_draws, args.seed)
            rows = []
            for c in range(len(st.spatial_pr)):
                cv = st.cumulative_variance[c]
                rows.append((c, st.selectivity.pr[c], st.spatial_pr[c], float(cv[0]),
                             int(np.searchsorted(cv, 0.9) + 1)))
            _write_csv(out / "channel_stats.csv",
                       ["channel", "selectivity_pr", "spatial_pr", "pc1_fraction", "n_pc_90"], rows)
            _dump_json(out / "summary.json", {"sigma": args.sigma,
                                              "spearman_selectivity_spatial": _finite(st.rank_correlation)})
        _manifest(out, args)


def _phi_table(model, ds, args) -> np.ndarray:
    return representation.phi(model, ds.images, args.sigma, args.n_draws, args.seed).values


def cmd_cluster(args) -> None:
    model, _ = _load_model(args.checkpoint)
    ds = _load_data(args.data)
    if not 1 <= args.k <= len(ds):
        raise UsageError(f"--k must lie in [1, {len(ds)}]")
    with _run_dir(args.out) as out:
        table = _phi_table(model, ds, args)
        cl = geometry.kmeans(table, args.k, args.restarts, args.seed, normalize=args.normalize)
        names = ds.names or [str(i) for i in range(len(ds))]
        labels = ds.labels if ds.labels is not None else [""] * len(ds)
        _write_csv(out / "assignments.csv", ["id", "name", "label", "cluster"],
                   [(i, names[i], labels[i], int(cl.assignments[i])) for i in range(len(ds))])
        summary = {"k": args.k, "wcss": cl.wcss, "restarts": args.restarts, "iterations": cl.n_iter,
                   "ari": None if ds.labels is None else geometry.agreement(cl.assignments, ds.labels)}
        try:
            sep = geometry.cluster_separation(table, cl, seed=args.seed)
            _write_csv(out / "separation.csv", ["cluster_a", "cluster_b", "distance", "spread", "ratio"],
                       [(a, b, d, s, r) for (a, b), d, s, r in
                        zip(sep.pairs, sep.distance, sep.spread, sep.ratio)])
            summary["fraction_ratio_above_2"] = _finite(sep.fraction_above(2.0))
        except ValueError as exc:
            summary["separation_error"] = str(exc)
        for c in range(args.k):
            members = np.flatnonzero(cl.assignments == c)[:args.exemplars]
            if len(members):
                imageio.write_image(out / f"cluster_{c:02d}.{args.format}",
                                    imageio.to_uint8(imageio.tile(ds.images[members])))
        _dump_json(out / "summary.json", summary)
        _manifest(out, args)


def cmd_neighbors(args) -> None:
    model, _ = _load_model(args.checkpoint)
    ds = _load_data(args.data)
    t = _image_index(ds, args.target)
    with _run_dir(args.out) as out:
        table = _phi_table(model, ds, args)
        phi_metric = "euclidean" if args.metric == "euclidean" else "cosine"
        ids, scores = geometry.nearest_neighbors(table[t], table, phi_metric, args.k)
        header = ["rank", "phi_id", "phi_score"]
        cols = [ids, scores]
        if args.metric == "pixel":
            pids, pscores = geometry.nearest_neighbors(ds.images[t], ds.images, "euclidean", args.k)
            header += ["pixel_id", "pixel_score"]
            cols += [pids, pscores]
        rows = [(r,) + tuple(int(c[r]) if j % 2 == 0 else float(c[r]) for j, c in enumerate(cols))
                for r in range(len(ids))]
        _write_csv(out / "neighbors.csv", header, rows)
        _manifest(out, args)


def _schedule(args, meta: dict, shape) -> sampler.Schedule:
    mean = meta.get("data_mean_image")
    mean = np.asarray(mean, dtype=np.float64).reshape(shape) if mean is not None else 0.5
    try:
        return sampler.make_schedule(args.sigma_max, args.sigma_min, args.T, mean=mean)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _sample_shape(model: unet.UNetModel):
    c = model.config
    return (c.in_channels, c.image_size, c.image_size)


def cmd_sample(args) -> None:
    model, meta = _load_model(args.checkpoint)
    shape = _sample_shape(model)
    sch = _schedule(args, meta, shape)
    with _run_dir(args.out) as out:
        log = sampler.TrajectoryLog()
        x = sampler.sample_unconditional(model, shape, sch, args.seed, n=args.n, rule=args.rule, log=log)
        _save_images(out, "sample", x, args.format)
        np.save(out / "samples.npy", x)
        log.to_csv(out / "trajectory.csv")
        _manifest(out, args)


def cmd_reconstruct(args) -> None:
    model, meta = _load_model(args.checkpoint)
    ds = _load_data(args.data)
    idx = _image_index(ds, args.conditioner)
    shape = _sample_shape(model)
    sch = _schedule(args, meta, shape)
    guide = sampler.GuidanceConfig(args.guidance_lr, 0 if args.no_guidance else args.max_iter,
                                   args.tol_rel, fixed_noise=args.fixed_noise)
    with _run_dir(args.out) as out:
        xc = np.repeat(ds.images[idx:idx + 1].astype(np.float64), args.n, axis=0)
        log = sampler.TrajectoryLog()
        x = sampler.reconstruct(model, xc, sch, guide, args.seed, rule=args.rule, log=log)
        _save_images(out, "sample", x, args.format)
        np.save(out / "samples.npy", x)
        log.to_csv(out / "trajectory.csv")
        ps = representation.phi(model, x, args.sigma, args.n_draws, args.seed).values
        pc = representation.phi(model, ds.images[idx], args.sigma, args.n_draws, args.seed).values
        rel = np.linalg.norm(ps - pc, axis=1) / np.linalg.norm(pc)
        _write_csv(out / "phi_match.csv", ["sample", "relative_phi_error"],
                   [(i, float(r)) for i, r in enumerate(rel)])
        _manifest(out, args)


def cmd_embed_check(args) -> None:
    if args.pairs < args.min_pairs:
        raise UsageError(f"--pairs must be at least {args.min_pairs}")
    model, meta = _load_model(args.checkpoint)
    ds = _load_data(args.data)
    if len(ds) < 2:
        raise UsageError("dataset needs at least two images")
    rng = np.random.default_rng(derive_seed(args.seed, "pairs"))
    pairs_idx = [tuple(int(v) for v in rng.choice(len(ds), size=2, replace=False)) for _ in range(args.pairs)]
    sch = _schedule(args, meta, _sample_shape(model))
    guide = sampler.GuidanceConfig(args.guidance_lr, args.max_iter, args.tol_rel)
    grid = np.geomspace(args.sigma_min, args.sigma_max, args.n_sigma)
    with _run_dir(args.out) as out:
        rep = embedding_check(model, [(ds.images[a], ds.images[b]) for a, b in pairs_idx], args.sigma,
                              grid, args.n_samples, sch, guide, args.seed, args.n_draws,
                              min_pairs=args.min_pairs)
        rep.to_csv(out / "embedding.csv")
        _write_csv(out / "pairs.csv", ["pair", "image_a", "image_b"],
                   [(i, a, b) for i, (a, b) in enumerate(pairs_idx)])
        _dump_json(out / "summary.json", {
            "schema_version": 1, "n_pairs": args.pairs, "n_used": int(rep.used.sum()),
            "n_excluded": rep.n_excluded, "A": rep.A, "B": rep.B, "B_over_A": _finite(rep.ratio),
            "A_p5": rep.A_p5, "B_p95": rep.B_p95, "spearman": _finite(rep.spearman),
            "analysis_sigma": args.sigma})
        _manifest(out, args)


# argument parsing ---------------------------------------------------------------

def _class_list(text: str) -> list[str]:
    names = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in names if c not in data.GENERATORS]
    if not names or bad:
        raise argparse.ArgumentTypeError(
            f"invalid class list {text!r}; choose from {','.join(sorted(data.GENERATORS))}")
    return names


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_model_data(p, data_required=True):
    p.add_argument("--checkpoint", required=True, help="checkpoint file or training run directory")
    p.add_argument("--data", required=data_required, help="dataset directory or manifest")


def _add_schedule(p, T=20):
    p.add_argument("--T", type=int, default=T, help="number of noise levels in the schedule")
    p.add_argument("--sigma-max", type=float, default=1.0)
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--rule", choices=sampler.STEP_RULES, default="full")


def _add_guidance(p):
    p.add_argument("--guidance-lr", type=float, default=sampler.GuidanceConfig.lr)
    p.add_argument("--max-iter", type=int, default=sampler.GuidanceConfig.max_iter)
    p.add_argument("--tol-rel", type=float, default=sampler.GuidanceConfig.tol_rel)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denoiserlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate textures or import an image folder")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_class_list, default=list(data.CLASSES))
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.add_argument("--from-folder", default=None, help="import PGM/PPM/PNG files instead of generating")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a blind denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay-factor", type=float, default=2.0)
    p.add_argument("--lr-decay-every", type=int, default=100)
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--sigma-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--encoder-blocks", type=int, default=2)
    p.add_argument("--layers-encoder", type=int, default=2)
    p.add_argument("--layers-middle", type=int, default=3)
    p.add_argument("--layers-decoder", type=int, default=3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="representation analyses")
    p.add_argument("analysis", choices=("sparsity", "selectivity", "stability", "stats"))
    _add_model_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=DEFAULT_ANALYSIS_SIGMA)
    p.add_argument("--sigma-ref", type=float, default=0.5)
    p.add_argument("--sigma-grid", type=_float_list, default=None)
    p.add_argument("--n-draws", type=int, default=representation.DEFAULT_N_DRAWS)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("cluster", help="k-means on phi vectors")
    _add_model_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--normalize", action="store_true", help="unit-normalize phi before clustering")
    p.add_argument("--sigma", type=float, default=DEFAULT_ANALYSIS_SIGMA)
    p.add_argument("--n-draws", type=int, default=representation.DEFAULT_N_DRAWS)
    p.add_argument("--exemplars", type=int, default=16)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("neighbors", help="nearest neighbours in phi space")
    _add_model_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--target", required=True, help="image index or name")
    p.add_argument("--metric", choices=("cosine", "euclidean", "pixel"), default="cosine",
                   help="'pixel' adds a pixel-space ranking next to the phi (cosine) ranking")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--sigma", type=float, default=DEFAULT_ANALYSIS_SIGMA)
    p.add_argument("--n-draws", type=int, default=representation.DEFAULT_N_DRAWS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_neighbors)

    p = sub.add_parser("sample", help="unconditional reverse diffusion")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=9)
    _add_schedule(p)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="sample images sharing a conditioner's phi")
    _add_model_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--conditioner", required=True, help="image index or name")
    p.add_argument("--n", type=int, default=8)
    _add_schedule(p)
    _add_guidance(p)
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--fixed-noise", action="store_true", help="reuse one conditioner noise draw")
    p.add_argument("--sigma", type=float, default=DEFAULT_ANALYSIS_SIGMA,
                   help="noise level for the reported phi match")
    p.add_argument("--n-draws", type=int, default=representation.DEFAULT_N_DRAWS)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("embed-check", help="phi distance versus conditional density distance")
    _add_model_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=30)
    p.add_argument("--min-pairs", type=int, default=10)
    p.add_argument("--n-samples", type=int, default=2)
    p.add_argument("--n-sigma", type=int, default=12)
    _add_schedule(p)
    _add_guidance(p)
    p.add_argument("--sigma", type=float, default=DEFAULT_ANALYSIS_SIGMA)
    p.add_argument("--n-draws", type=int, default=representation.DEFAULT_N_DRAWS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:     # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"denoiserlab: error: {exc}", file=sys.stderr)
        return 2
    except (RunLockedError, data.DatasetError, trainer.CheckpointError, trainer.TrainingError,
            sampler.SamplingError, DivergenceError, geometry.KMeansError, OSError, ValueError) as exc:
        print(f"denoiserlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
