"""Command-line entry point.

Subcommands: gen, train, eval, gradcheck, heatmap, km. Exit codes: 0 on
success, 1 for runtime/data failures, 2 for usage or configuration errors.
Setting XFUSE_SEED overrides --seed for any subcommand that accepts one.
All outputs (TSV/CSV/JSON/PGM and figures) are byte-deterministic given
identical flags and inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import SynthConfig, kfold_split, load_dataset, read_manifest, synth_generate, write_bag, write_manifest
from .errors import ConfigError, CrossFusionError, InputError
from .layers import (
    init_attention,
    init_linear,
    linear,
    multi_head_attention,
    named_params,
)
from .model import (
    ModelConfig,
    attention_maps,
    cross_attention_block,
    conv_processor,
    forward,
    init_params,
    load_checkpoint,
    pad_transformer,
    _init_cab,
    _init_conv_processor,
    _init_pad_transformer,
)
from .survival import SurvivalLabel, km_curve, logrank_p, nll_loss
from .tensor import Tensor, finite_diff_check
from .train import RunConfig, evaluate, run_experiment

GRADCHECK_TOLERANCE = 1e-4

LAYER_KEYS = {
    "cab-coarse": "cab_coarse",
    "cab-fine": "cab_fine",
    "pt-source": "pt_source",
    "pt-fused": "pt_fused",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossfusion",
        description="Multi-scale attention-fusion survival model: data synthesis, "
        "training, evaluation, and report emission.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-scale cohort")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-slides", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--signal", choices=["multi", "single", "none"], default="multi")
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--censor-rate", type=float, default=0.3)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run k-fold cross-validated training")
    p.add_argument("--data", required=True, help="directory containing manifest.tsv")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=4e-6)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--bins", type=int, default=4)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-mult", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--variant", choices=["full", "no-cp", "no-fc"], default="full")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a trained fold checkpoint")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--data", default=None, help="override the data directory")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--out", default=None, help="report JSON path (default: fold dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="export per-patch attention scores")
    p.add_argument("--run", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--layer", choices=sorted(LAYER_KEYS), required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--pgm", default=None, help="optional 8-bit PGM rendering")
    p.add_argument("--fig", default=None, help="figure path (default: CSV path with .png)")
    p.add_argument("--no-fig", action="store_true", help="skip the figure")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("km", help="pooled Kaplan-Meier report over all folds")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--fig", default=None, help="figure path (default: CSV path with .png)")
    p.add_argument("--no-fig", action="store_true", help="skip the figure")
    p.set_defaults(func=cmd_km)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (2)
        return int(exc.code or 0)
    if "XFUSE_SEED" in os.environ and hasattr(args, "seed"):
        args.seed = int(os.environ["XFUSE_SEED"])
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CrossFusionError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


# -- gen ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    try:
        (out / "bags").mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from exc
    mode = {"multi": "multi_scale", "single": "single_scale", "none": "none"}[args.signal]
    cfg = SynthConfig(
        n_slides=args.n_slides,
        d_in=args.d_in,
        signal_mode=mode,
        censor_rate=args.censor_rate,
        seed=args.seed,
    )
    bags, records = synth_generate(cfg)
    for bag, rec in zip(bags, records):
        write_bag(bag, out / rec.bag_path)
    write_manifest(records, out / "manifest.tsv")
    means = {
        s: float(np.mean([b.features(s).shape[0] for b in bags]))
        for s in ("coarse", "source", "fine")
    }
    print(
        f"generated {len(bags)} slides (signal={args.signal}, seed={args.seed}); "
        f"mean patches coarse/source/fine = "
        f"{means['coarse']:.1f}/{means['source']:.1f}/{means['fine']:.1f}"
    )
    return 0


# -- train ----------------------------------------------------------------------


def cmd_train(args) -> int:
    model = ModelConfig(
        d_in=_peek_d_in(Path(args.data)),
        d_e=args.d_model,
        n_heads=args.heads,
        ffn_mult=args.ffn_mult,
        dropout=args.dropout,
        n_bins=args.bins,
        variant=args.variant.replace("-", "_"),
    )
    cfg = RunConfig(
        model=model,
        epochs=args.epochs,
        warmup_epochs=args.warmup,
        folds=args.folds,
        seed=args.seed,
        lr=args.lr,
        weight_decay=args.wd,
    )
    summary = run_experiment(args.data, cfg, args.out)
    for fold in summary["folds"]:
        print(f"fold {fold['fold']}: c-index {fold['c_index']:.4f}")
    print(
        f"mean c-index {summary['c_index_mean']:.4f} "
        f"(std {summary['c_index_std']:.4f}) over {len(summary['folds'])} folds"
    )
    _render_loss_curves(Path(args.out))
    return 0


def _peek_d_in(data_dir: Path) -> int:
    from .data import read_bag

    records = read_manifest(data_dir / "manifest.tsv")
    if not records:
        raise InputError(f"manifest in {data_dir} lists no slides")
    return read_bag(data_dir / records[0].bag_path).d_in


def _render_loss_curves(run_dir: Path) -> None:
    from .plots import loss_curves_figure

    curves = {}
    for fold_dir in sorted(run_dir.glob("fold_*")):
        metrics = json.loads((fold_dir / "metrics.json").read_text())
        curves[metrics["fold"]] = metrics["epoch_losses"]
    if curves:
        loss_curves_figure(curves, run_dir / "loss_curves.png")


# -- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run_cfg = json.loads((run_dir / "config.json").read_text())
    data_dir = Path(args.data) if args.data else Path(run_cfg["data_dir"])
    model_cfg, params = load_checkpoint(run_dir / f"fold_{args.fold}" / "checkpoint.xfckpt")
    bags = load_dataset(data_dir / "manifest.tsv")
    splits = kfold_split(len(bags), run_cfg["folds"], run_cfg["seed"])
    if not 0 <= args.fold < len(splits):
        raise ConfigError(f"fold {args.fold} outside [0, {len(splits)})")
    train_idx, val_idx = splits[args.fold]
    chosen = {"val": val_idx, "train": train_idx, "all": np.arange(len(bags))}[args.split]
    report = evaluate(params, model_cfg, [bags[i] for i in chosen])
    out = Path(args.out) if args.out else run_dir / f"fold_{args.fold}" / f"eval_{args.split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    print(f"fold {args.fold} {args.split}: c-index {report.c_index:.4f} -> {out}")
    return 0


# -- gradcheck -------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    d = args.d_model
    heads = args.heads
    if d < 2 or d % 2 != 0:
        raise ConfigError(f"--d-model must be even and >= 2, got {d}")
    if d % heads != 0 or (d // heads) % 2 != 0:
        raise ConfigError(
            f"--d-model {d} with --heads {heads} does not split into even-width heads"
        )
    results = []
    for name, fn in _gradcheck_components(d, heads, args.seed):
        results.append((name, fn(args.eps)))
    width = max(len(n) for n, _ in results)
    worst = 0.0
    for name, err in results:
        worst = max(worst, err)
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:<{width}}  max_rel_err {err:.3e}  {status}")
    if worst >= GRADCHECK_TOLERANCE:
        offenders = [n for n, e in results if e >= GRADCHECK_TOLERANCE]
        print(f"gradient check FAILED for: {', '.join(offenders)}", file=sys.stderr)
        return 1
    print(f"all components below {GRADCHECK_TOLERANCE:.0e}")
    return 0


def _gradcheck_components(d: int, heads: int, seed: int):
    """Fixed, well-conditioned fixtures for every differentiable component."""
    data_rng = np.random.default_rng(seed + 6)
    mk = lambda shape: Tensor(data_rng.standard_normal(shape), requires_grad=True)
    mix = lambda shape: Tensor(data_rng.standard_normal(shape))
    cfg = ModelConfig(d_in=16, d_e=d, n_heads=heads, n_bins=4, dropout=0.0)

    def check(f, params, eps):
        return finite_diff_check(f, params, eps=eps, coords_per_param=6, seed=0)

    def c_linear(eps):
        p = init_linear(np.random.default_rng(seed), d, d)
        x, m = mk((5, d)), mix((5, d))
        f = lambda: T.sum_all(T.mul(linear(p, x), m))
        return check(f, [x] + [t for _, t in named_params(p)], eps)

    def c_layer_norm(eps):
        g = Tensor(np.ones(d), requires_grad=True)
        b = Tensor(np.zeros(d), requires_grad=True)
        x, m = mk((4, d)), mix((4, d))
        f = lambda: T.sum_all(T.mul(T.layer_norm(x, g, b), m))
        return check(f, [x, g, b], eps)

    def c_attention(eps):
        p = init_attention(np.random.default_rng(seed), d, heads)
        q, kv, m = mk((3, d)), mk((4, d)), mix((3, d))
        f = lambda: T.sum_all(T.mul(multi_head_attention(p, q, kv)[0], m))
        return check(f, [q, kv] + [t for _, t in named_params(p)], eps)

    def c_conv2d(eps):
        w = Tensor(np.random.default_rng(seed).uniform(-0.3, 0.3, (d, 1, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(d), requires_grad=True)
        x, m = mk((d, 3, 4)), mix((d, 3, 4))
        f = lambda: T.sum_all(T.mul(T.grouped_conv2d(x, w, b, groups=d), m))
        return check(f, [x, w, b], eps)

    def c_conv3d(eps):
        w = Tensor(np.random.default_rng(seed).uniform(-0.3, 0.3, (3, 3, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        x, m = mk((3, 4, 3, 3)), mix((1, 4, 3, 3))
        f = lambda: T.sum_all(T.mul(T.conv3d_fuse(x, w, b), m))
        return check(f, [x, w, b], eps)

    def c_cab(eps):
        p = _init_cab(np.random.default_rng(seed), cfg)
        x, ctx, m = mk((3, d)), mk((4, d)), mix((3, d))
        f = lambda: T.sum_all(T.mul(cross_attention_block(x, ctx, p)[0], m))
        return check(f, [x, ctx] + [t for _, t in named_params(p)], eps)

    def c_pad_transformer(eps):
        p = _init_pad_transformer(np.random.default_rng(seed), cfg)
        x, m = mk((5, d)), mix((5, d))
        f = lambda: T.sum_all(T.mul(pad_transformer(x, p)[0], m))
        return check(f, [x] + [t for _, t in named_params(p)], eps)

    def c_conv_processor(eps):
        p = _init_conv_processor(np.random.default_rng(seed), cfg)
        xs = [mk((5, d)) for _ in range(3)]
        m = mix((9, d))
        f = lambda: T.sum_all(T.mul(conv_processor(*xs, p), m))
        return check(f, xs + [t for _, t in named_params(p)], eps)

    def c_full_model(eps):
        params = init_params(cfg, seed=seed)
        bag = _gradcheck_bag(data_rng)
        label = SurvivalLabel(event_time=100.0, event=1, bin=1)

        def f():
            out = forward(bag, params, cfg, mode="eval")
            return nll_loss(out.hazards, label)

        return finite_diff_check(
            f, list(named_params(params)), eps=eps, coords_per_param=2, seed=0
        )

    return [
        ("linear", c_linear),
        ("layer_norm", c_layer_norm),
        ("softmax_attention", c_attention),
        ("grouped_conv2d", c_conv2d),
        ("conv3d_fuse", c_conv3d),
        ("cross_attention_block", c_cab),
        ("pad_transformer", c_pad_transformer),
        ("conv_processor", c_conv_processor),
        ("full_model", c_full_model),
    ]


def _gradcheck_bag(rng):
    from .data import FeatureBag, _grid_coords

    return FeatureBag(
        slide_id="gradcheck",
        coarse=rng.standard_normal((3, 16)),
        source=rng.standard_normal((5, 16)),
        fine=rng.standard_normal((9, 16)),
        coarse_coords=_grid_coords(3),
        source_coords=_grid_coords(5),
        fine_coords=_grid_coords(9),
    )


# -- heatmap --------------------------------------------------------------------


def cmd_heatmap(args) -> int:
    run_dir = Path(args.run)
    run_cfg = json.loads((run_dir / "config.json").read_text())
    data_dir = Path(run_cfg["data_dir"])
    records = {r.slide_id: r for r in read_manifest(data_dir / "manifest.tsv")}
    if args.slide not in records:
        raise ConfigError(f"unknown slide {args.slide!r}")
    from .data import read_bag

    bag = read_bag(data_dir / records[args.slide].bag_path)
    bag.slide_id = args.slide
    model_cfg, params = load_checkpoint(run_dir / f"fold_{args.fold}" / "checkpoint.xfckpt")
    maps = attention_maps(bag, params, model_cfg)
    key = LAYER_KEYS[args.layer]
    if key not in maps:
        raise ConfigError(f"layer {args.layer!r} not available for variant {model_cfg.variant!r}")
    scores = maps[key]
    scale = _layer_scale(key, model_cfg.variant)
    coords = bag.coords(scale)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write("x,y,score\n")
        for (x, y), s in zip(coords, scores):
            f.write(f"{int(x)},{int(y)},{float(s)!r}\n")
    if args.pgm:
        _write_pgm(coords, scores, Path(args.pgm))
    if not args.no_fig:
        from .plots import heatmap_figure

        fig_path = Path(args.fig) if args.fig else out.with_suffix(".png")
        heatmap_figure(coords, scores, args.layer, fig_path)
    print(f"wrote {len(scores)} scores for layer {args.layer} of slide {args.slide}")
    return 0


def _layer_scale(key: str, variant: str) -> str:
    if key == "cab_coarse":
        return "coarse"
    if key == "cab_fine":
        return "fine"
    # source pad-transformer and fused tokens live at the source scale, except
    # in the no_fc ablation where the fine patches are the source branch
    return "fine" if variant == "no_fc" else "source"


def _write_pgm(coords: np.ndarray, scores: np.ndarray, path: Path) -> None:
    """Binary 8-bit PGM of the score grid; cells without a patch stay 0."""
    w = int(coords[:, 0].max()) + 1
    h = int(coords[:, 1].max()) + 1
    img = np.zeros((h, w), dtype=np.uint8)
    for (x, y), s in zip(coords, scores):
        img[int(y), int(x)] = int(round(255 * float(s)))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


# -- km ------------------------------------------------------------------------


def cmd_km(args) -> int:
    run_dir = Path(args.run)
    run_cfg = json.loads((run_dir / "config.json").read_text())
    risks, times, events = [], [], []
    for fold in range(run_cfg["folds"]):
        path = run_dir / f"fold_{fold}" / "risks.tsv"
        if not path.exists():
            raise InputError(f"missing fold output: {path}")
        for line in path.read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            _sid, risk, time, event = line.split("\t")
            risks.append(float(risk))
            times.append(float(time))
            events.append(int(event))
    r = np.asarray(risks)
    t = np.asarray(times)
    e = np.asarray(events)
    hi = r > float(np.median(r))
    if not hi.any() or hi.all():
        raise InputError("median split produced an empty risk group")
    high = km_curve(t[hi], e[hi])
    low = km_curve(t[~hi], e[~hi])
    chi2, p = logrank_p(t[hi], e[hi], t[~hi], e[~hi])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write(f"# logrank_p={p!r}\n")
        f.write(f"# chi2={chi2!r}\n")
        f.write("group,time,survival\n")
        for name, curve in (("high", high), ("low", low)):
            f.write(f"{name},0.0,1.0\n")
            for time, surv in zip(curve.times, curve.survival):
                f.write(f"{name},{float(time)!r},{float(surv)!r}\n")
    if not args.no_fig:
        from .plots import km_figure

        fig_path = Path(args.fig) if args.fig else out.with_suffix(".png")
        km_figure(high, low, p, fig_path)
    print(f"pooled {len(risks)} validation slides; log-rank p = {p:.4e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
