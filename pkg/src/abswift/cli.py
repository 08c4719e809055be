"""Command-line surface: data generation, training, evaluation, prediction,
and the ablation ladder.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields as dc_fields, replace
from pathlib import Path

import numpy as np
import torch

from . import configure_threads
from .dataset import (
    FlowSample,
    classify_stability,
    build_splits,
    compute_stats,
    generate_geometry,
    make_sample,
    normalize_coords,
    points_in_box,
    read_sample,
    sample_stability,
    write_sample,
    ZONE_X,
    ZONE_Y,
)
from .io_utils import DataFormatError
from .model import (
    ModelConfig,
    build,
    desk_config,
    load_weights,
    paper_config,
    save_weights,
)
from .training import (
    FIELD_GROUPS,
    METRIC_NAMES,
    TrainConfig,
    aggregate_reports,
    evaluate_model,
    evaluation_loss,
    train,
)

N_DUP_GEOMETRIES = 3
N_DUP_STABILITIES = 6
DUP_MIN_SAMPLES = 40  # below this the repeated-geometry block would crowd out train

DESK_COUNTS = {"n_gnd": 512, "n_obs": 512, "n_vol": 4096, "buildings": 8}
PAPER_COUNTS = {"n_gnd": 4096, "n_obs": 4096, "n_vol": 16384, "buildings": 35}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_run_config(path: Path | None) -> tuple[ModelConfig, TrainConfig]:
    """Parse a key=value run config file ('#' comments, unknown keys rejected).

    Keys: ``preset`` (desk|paper), ``model.<field>``, ``train.<field>``.
    """
    model_fields = {f.name: f for f in dc_fields(ModelConfig)}
    train_fields = {f.name: f for f in dc_fields(TrainConfig)}
    model_over: dict = {}
    train_over: dict = {}
    preset = "desk"
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "preset":
                if value not in ("desk", "paper"):
                    raise UsageError(f"{path}:{lineno}: unknown preset {value!r}")
                preset = value
            elif key.startswith("model.") and key[6:] in model_fields:
                f = model_fields[key[6:]]
                model_over[f.name] = value if f.type == "str" else (
                    float(value) if f.type == "float" else int(value)
                )
            elif key.startswith("train.") and key[6:] in train_fields:
                f = train_fields[key[6:]]
                train_over[f.name] = value if f.type == "str" else (
                    float(value) if f.type == "float" else int(value)
                )
            else:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
    base = desk_config() if preset == "desk" else paper_config()
    model_cfg = replace(base, **model_over).validate()
    train_cfg = replace(TrainConfig(), **train_over).validate()
    return model_cfg, train_cfg


def echo_config(out_dir: Path, sections: dict[str, dict]) -> None:
    lines = []
    for prefix, values in sections.items():
        for key in sorted(values):
            lines.append(f"{prefix}.{key}={values[key]}")
    (out_dir / "run_config_echo.txt").write_text("\n".join(lines) + "\n")


def _dataclass_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dc_fields(obj)}


def load_split(data_dir: Path, split: str) -> list[FlowSample]:
    manifest = data_dir / f"manifest_{split}.txt"
    if not manifest.exists():
        raise DataFormatError(f"missing manifest file: {manifest}")
    return [
        read_sample(data_dir / rel)
        for rel in manifest.read_text().splitlines()
        if rel
    ]


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = dict(PAPER_COUNTS if args.paper_scale else DESK_COUNTS)
    buildings = args.buildings if args.buildings is not None else counts["buildings"]
    if buildings < 1:
        raise UsageError("--buildings must be >= 1")
    n = args.n_samples
    rng = np.random.default_rng(args.seed)

    samples: list[FlowSample] = []
    geometry_id = 0
    if n >= DUP_MIN_SAMPLES:
        for _ in range(N_DUP_GEOMETRIES):
            geometry = generate_geometry(rng, buildings)
            for _ in range(N_DUP_STABILITIES):
                samples.append(
                    make_sample(
                        rng, buildings, counts["n_gnd"], counts["n_obs"],
                        counts["n_vol"], geometry=geometry,
                        stability=sample_stability(rng), geometry_id=geometry_id,
                    )
                )
            geometry_id += 1
    while len(samples) < n:
        samples.append(
            make_sample(
                rng, buildings, counts["n_gnd"], counts["n_obs"],
                counts["n_vol"], geometry_id=geometry_id,
            )
        )
        geometry_id += 1

    paths = []
    for i, s in enumerate(samples):
        rel = f"sample_{i:04d}.bin"
        write_sample(s, out / rel)
        paths.append(rel)

    splits = build_splits(samples, rng)
    for split, idxs in splits.items():
        rels = sorted(paths[i] for i in idxs)
        (out / f"manifest_{split}.txt").write_text("\n".join(rels) + "\n")

    hist = {"unstable": 0, "neutral": 0, "stable": 0}
    for s in samples:
        hist[classify_stability(s.stability.inv_lmo)] += 1
    print(f"wrote {n} samples to {out}")
    print(
        "stability histogram: "
        + " ".join(f"{k}={v}" for k, v in hist.items())
    )
    print(
        "split sizes: "
        + " ".join(f"{k}={len(v)}" for k, v in splits.items())
    )
    echo_config(
        out,
        {
            "gen": {
                "n_samples": n,
                "seed": args.seed,
                "buildings": buildings,
                "scale": "paper" if args.paper_scale else "desk",
                **{k: v for k, v in counts.items() if k != "buildings"},
            }
        },
    )
    return 0


def _train_pipeline(
    data_dir: Path,
    out_dir: Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    resume: Path | None = None,
    tag: str = "",
):
    train_samples = load_split(data_dir, "train")
    valid_samples = load_split(data_dir, "valid")
    stats = compute_stats(train_samples)
    if resume is not None:
        model, loaded_stats = load_weights(resume, expect_config=model_cfg)
        if loaded_stats is not None:
            stats = loaded_stats
    else:
        model = build(model_cfg, seed=train_cfg.seed)
    initial_valid = evaluation_loss(model, valid_samples, stats)
    result = train(model, train_samples, stats, train_cfg)
    final_valid = evaluation_loss(model, valid_samples, stats)

    suffix = f"_{tag}" if tag else ""
    save_weights(model, out_dir / f"weights{suffix}.bin", stats=stats)
    with open(out_dir / f"loss_trace{suffix}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        w.writerows(result.trace)
    return model, stats, result, initial_valid, final_valid


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg, train_cfg = parse_run_config(
        Path(args.config) if args.config else None
    )
    echo_config(
        out, {"model": _dataclass_dict(model_cfg), "train": _dataclass_dict(train_cfg)}
    )
    resume = Path(args.resume) if args.resume else None
    _, _, result, init_v, final_v = _train_pipeline(
        data_dir, out, model_cfg, train_cfg, resume=resume
    )
    print(f"final train loss: {result.final_loss:.6g}")
    print(f"validation loss: initial {init_v:.6g} final {final_v:.6g}")
    return 0


def _emit_reports(out: Path, names: list[str], reports: list[dict], tag: str = ""):
    suffix = f"_{tag}" if tag else ""
    with open(out / f"metrics{suffix}.jsonl", "w") as f:
        for name, rep in zip(names, reports):
            for field in FIELD_GROUPS:
                for metric in METRIC_NAMES:
                    f.write(
                        json.dumps(
                            {
                                "sample": name,
                                "stability_class": rep["stability_class"],
                                "field": field,
                                "metric": metric,
                                "value": rep["metrics"][field][metric],
                            }
                        )
                        + "\n"
                    )
    agg = aggregate_reports(reports)
    (out / f"aggregate{suffix}.json").write_text(json.dumps(agg, indent=2) + "\n")
    return agg


def _format_table(columns: dict[str, dict]) -> str:
    """Rows per (field, metric), one column per entry of ``columns``."""
    names = list(columns)
    lines = [f"{'field':10s} {'metric':8s} " + " ".join(f"{n:>22s}" for n in names)]
    for field in FIELD_GROUPS:
        for metric in METRIC_NAMES:
            cells = []
            for n in names:
                cell = columns[n][field][metric]
                if cell["mean"] is None:
                    cells.append(f"{'-':>22s}")
                else:
                    cells.append(f"{cell['mean']:>11.4g} ±{cell['std']:>9.3g}")
            lines.append(f"{field:10s} {metric:8s} " + " ".join(cells))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, stats = load_weights(Path(args.weights))
    if stats is None:
        raise DataFormatError(
            f"weight file {args.weights} carries no normalization statistics; "
            "evaluation would disagree with the training normalization"
        )
    manifest = data_dir / f"manifest_{args.split}.txt"
    if not manifest.exists():
        raise DataFormatError(f"missing manifest file: {manifest}")
    names = [rel for rel in manifest.read_text().splitlines() if rel]
    samples = [read_sample(data_dir / rel) for rel in names]
    reports = evaluate_model(
        model, samples, stats, mean_baseline=args.mean_baseline
    )
    agg = _emit_reports(out, names, reports)
    label = "mean-baseline" if args.mean_baseline else "model"
    table = _format_table({label: agg})
    print(table)
    (out / "aggregate.txt").write_text(table + "\n")
    return 0


def _slice_points(z: float, spacing: float = 4.0) -> np.ndarray:
    xs = np.arange(ZONE_X[0] + spacing / 2, ZONE_X[1], spacing)
    ys = np.arange(ZONE_Y[0] + spacing / 2, ZONE_Y[1], spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])


def cmd_predict(args) -> int:
    model, stats = load_weights(Path(args.weights))
    if stats is None:
        raise DataFormatError("weight file carries no normalization statistics")
    sample = read_sample(Path(args.sample))

    if args.slice is not None:
        if not args.slice.startswith("z="):
            raise UsageError("--slice expects the form z=<height>")
        points = _slice_points(float(args.slice[2:]))
    else:
        points = np.loadtxt(args.points, delimiter=",", ndmin=2)[:, :3]

    from .dataset import ZONE_Z

    lo = np.array([ZONE_X[0], ZONE_Y[0], ZONE_Z[0]])
    hi = np.array([ZONE_X[1], ZONE_Y[1], ZONE_Z[1]])
    outside = ((points < lo) | (points > hi)).any(axis=1)
    if outside.any():
        raise UsageError(
            f"{int(outside.sum())} query points fall outside the domain box "
            f"x{ZONE_X} y{ZONE_Y} z{ZONE_Z}"
        )

    inside = np.zeros(points.shape[0], dtype=bool)
    for box in sample.geometry.boxes:
        inside |= points_in_box(points, box)
    skipped = int(inside.sum())
    points = points[~inside]
    if skipped:
        print(f"skipped {skipped} points inside buildings", file=sys.stderr)

    # queries ride along as non-anchor tokens; anchors come from the sample's
    # stored volume cloud, so partial-domain inference stays consistent
    from .dataset import normalize_sample

    ns = normalize_sample(sample, stats)
    n_stored = ns.volume_coords.shape[0]
    query_norm = torch.from_numpy(
        normalize_coords(points).astype(np.float32)
    )
    combined = replace(
        ns,
        volume_coords=torch.cat([ns.volume_coords, query_norm], dim=0),
        fields=torch.cat(
            [ns.fields, torch.zeros(points.shape[0], 7)], dim=0
        ),
    )
    rng = np.random.default_rng(args.seed)
    anchor_idx = model.draw_anchors(n_stored, rng)
    with torch.no_grad():
        pred, _ = model(combined, rng, chunk_size=256, anchor_idx=anchor_idx)
    from .dataset import denormalize_fields

    phys = denormalize_fields(pred.numpy()[n_stored:], stats)
    phys[:, 5] = 10.0 ** phys[:, 5]
    phys[:, 6] = 10.0 ** phys[:, 6]

    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "z", "vx", "vy", "vz", "p", "theta", "k", "eps"])
        for c, row in zip(points, phys):
            w.writerow([f"{v:.8g}" for v in (*c, *row)])
    print(f"wrote {points.shape[0]} rows to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = [s.strip() for s in args.steps.split(",") if s.strip()]
    for s in steps:
        if s == "0":
            raise UsageError(
                "step 0 (separate surface branch) is an unsupported variant"
            )
        if s not in ("1", "2", "3", "4"):
            raise UsageError(f"unknown ablation step {s!r}")
    model_cfg, train_cfg = parse_run_config(
        Path(args.config) if args.config else None
    )
    echo_config(
        out,
        {
            "model": _dataclass_dict(model_cfg),
            "train": _dataclass_dict(train_cfg),
            "ablate": {"steps": ",".join(steps), "shared_seed": train_cfg.seed},
        },
    )
    manifest = data_dir / "manifest_test.txt"
    if not manifest.exists():
        raise DataFormatError(f"missing manifest file: {manifest}")
    names = [rel for rel in manifest.read_text().splitlines() if rel]
    test_samples = [read_sample(data_dir / rel) for rel in names]

    columns = {}
    for s in steps:
        tag = f"step{s}"
        cfg = replace(model_cfg, variant=tag)
        model, stats, _, _, _ = _train_pipeline(
            data_dir, out, cfg, train_cfg, tag=tag
        )
        reports = evaluate_model(model, test_samples, stats)
        columns[tag] = _emit_reports(out, names, reports, tag=tag)
    table = _format_table(columns)
    print(table)
    (out / "ablation_table.txt").write_text(table + "\n")
    (out / "ablation_table.json").write_text(json.dumps(columns, indent=2) + "\n")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="abswift", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a dataset with splits")
    g.add_argument("--out", required=True)
    g.add_argument("--n-samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--buildings", type=int, default=None)
    scale = g.add_mutually_exclusive_group()
    scale.add_argument("--desk", dest="paper_scale", action="store_false")
    scale.add_argument("--paper-scale", dest="paper_scale", action="store_true")
    g.set_defaults(paper_scale=False, func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute metrics on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--mean-baseline", action="store_true")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="predict fields at points or a slice")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--sample", required=True)
    pts = pr.add_mutually_exclusive_group(required=True)
    pts.add_argument("--points", default=None)
    pts.add_argument("--slice", default=None)
    pr.add_argument("--out", required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    a.add_argument("--data", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--steps", default="1,2,3,4")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    configure_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
