"""Command line entry point: ``nag <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.  Errors
are reported as a single ``nag: error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import secrets
import sys
import time
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError

log = logging.getLogger("nagen")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
BENCH_FIELDS = ("batch", "length", "dims", "mode", "workers", "wall_ms", "pairs_per_sec")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22")


class UsageError(Exception):
    pass


def _seed(value, what: str) -> int:
    if value is not None:
        return int(value)
    seed = secrets.randbits(31)
    log.warning("no --seed given for %s; using generated seed %d", what, seed)
    return seed


def _csv_floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ------------------------------------------------------------------ prepare


def cmd_prepare(args) -> int:
    from .gestures import Dataset, prepare_gesture, remap_classes, load_dataset, save_dataset

    if args.length < 2:
        raise UsageError("--length must be >= 2")
    src = load_dataset(args.input, args.format)
    # report original labels, not the load-time remap
    inverse = {v: k for k, v in src.class_map.items()}
    kept, rejected = [], []
    for g in src.gestures:
        try:
            kept.append(prepare_gesture(g, args.length))
        except DataError as e:
            rejected.append((g.id, str(e)))
    for gid, reason in rejected:
        print(f"rejected\t{gid}\t{reason}", file=sys.stderr)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump([{"id": i, "reason": r} for i, r in rejected], fh, indent=2)
            fh.write("\n")
    if not kept:
        raise DataError("no gesture survived preparation")
    original = [g.with_points(g.points) for g in kept]
    relabeled = [type(g)(g.points, inverse.get(g.class_id, g.class_id), g.subject_id, g.id) for g in original]
    gestures, mapping = remap_classes(relabeled)
    out = Dataset(gestures, len(mapping), mapping)
    save_dataset(out, args.output)
    for c, n in out.class_counts().items():
        print(f"class {c}\t{n}")
    print(f"wrote {len(out)} gestures ({len(rejected)} rejected) to {args.output}")
    return 0


def cmd_make_toy(args) -> int:
    from .toy import toy_raw_gestures

    gestures = toy_raw_gestures(args.per_class, args.subjects, _seed(args.seed, "make-toy"))
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "class", "subject", "t", "x", "y"])
        for g in gestures:
            for t, (x, y) in enumerate(g.points.T):
                w.writerow([g.id, g.class_id, g.subject_id, t, repr(float(x)), repr(float(y))])
    print(f"wrote {len(gestures)} raw gestures to {args.output}")
    return 0


# -------------------------------------------------------------------- train


def _load_config(args):
    from .trainer import TrainConfig

    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON ({e.msg})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    if args.max_steps is not None:
        raw["max_steps"] = args.max_steps
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw and not args.resume:
        raw["seed"] = _seed(None, "train")
    try:
        config = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    errors = config.validate()
    if errors:
        raise UsageError("invalid config: " + "; ".join(errors))
    return config


def cmd_train(args) -> int:
    from .gestures import load_dataset
    from .generator import save_checkpoint
    from .trainer import init_state, load_state, save_state, train

    config = _load_config(args)
    dataset = load_dataset(args.dataset)
    if dataset.length != config.length:
        raise DataError(f"dataset length {dataset.length} != config length {config.length}; run prepare first")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    log_path = out / "log.jsonl"

    if args.resume:
        state = load_state(args.resume)
        # drop log lines past the resumed step so the log continues seamlessly
        lines = log_path.read_text().splitlines() if log_path.exists() else []
        kept = [ln for ln in lines if ln.strip() and json.loads(ln)["step"] <= state.step]
        log_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        state = init_state(dataset, config)
        log_path.write_text("")
        save_state(out / "checkpoint-0000000.npz", state, config)

    with open(log_path, "a") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

        result = train(dataset, config, state=state, out_dir=out, on_step=on_step)
    if result.history:
        save_state(out / "final.npz", result.final, config)
        meta = {"best_total": result.final.best_total, "config": config.to_dict()}
        save_checkpoint(out / "best.npz", result.params, result.final.step, meta=meta)
        last = result.history[-1]
        print(f"step {last['step']}: total {last['total']:.6g} (best {result.final.best_total:.6g})")
    else:
        print(f"no steps run; state at step {state.step}")
    return 0


# ----------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    from .generator import load_checkpoint
    from .gestures import Dataset, save_dataset
    from .trainer import generate

    params, header, _ = load_checkpoint(args.checkpoint)
    if not 0 <= args.class_id < params.class_count:
        raise DataError(f"unknown class {args.class_id}; checkpoint has {params.class_count} classes")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    length = args.length or header.get("meta", {}).get("config", {}).get("length", 64)
    samples = generate(params, args.class_id, args.count, _seed(args.seed, "generate"), length)
    save_dataset(Dataset(samples, params.class_count), args.output)
    print(f"wrote {len(samples)} samples of class {args.class_id} to {args.output}")
    return 0


def render_svg(gestures, columns: int = 8, cell: int = 96) -> str:
    """One grid cell per gesture, each drawn as a polyline coloured by class."""
    gestures = list(gestures)
    columns = max(1, min(columns, len(gestures) or 1))
    rows = max(1, -(-len(gestures) // columns))
    pad = 6
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{columns * cell}" height="{rows * cell}" '
        f'viewBox="0 0 {columns * cell} {rows * cell}">',
        f'<rect width="{columns * cell}" height="{rows * cell}" fill="white"/>',
    ]
    for k, g in enumerate(gestures):
        r, c = divmod(k, columns)
        xy = g.points[:2] if g.dims >= 2 else np.vstack([np.arange(g.length, dtype=float), g.points[0]])
        lo = xy.min(axis=1, keepdims=True)
        span = float((xy.max(axis=1, keepdims=True) - lo).max()) or 1.0
        scaled = (xy - lo) / span * (cell - 2 * pad) + pad
        pts = " ".join(f"{c * cell + x:.2f},{r * cell + (cell - y):.2f}" for x, y in scaled.T)
        color = PALETTE[g.class_id % len(PALETTE)]
        parts.append(f'<g class="cell" data-id="{g.id}" data-class="{g.class_id}">'
                     f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" fill="none" stroke="#ddd"/>'
                     f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/></g>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_export_svg(args) -> int:
    from .gestures import load_dataset

    data = load_dataset(args.input, remap=False)
    Path(args.output).write_text(render_svg(data.gestures, args.columns))
    print(f"wrote {len(data)} cells to {args.output}")
    return 0


# ------------------------------------------------------------- eval-augment


def cmd_eval_augment(args) -> int:
    from .augment import (BASELINE, NOISE, generator_augmenter, noise_augment, run_experiment, score_generators,
                          write_results_csv)
    from .generator import load_checkpoint
    from .gestures import load_dataset, split_subject_independent

    fractions = _csv_floats(args.fractions)
    seeds = _csv_ints(args.seeds)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise UsageError("--fractions needs three positive numbers")
    data = load_dataset(args.dataset)
    augmenters = {
        BASELINE: None,
        NOISE: lambda train, rng: noise_augment(train, args.noise_magnitude, None, rng),
    }
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise DataError(f"checkpoint {args.checkpoint} not found")
        params, header, _ = load_checkpoint(args.checkpoint)
        if params.class_count != data.class_count or params.output_dim != data.dims:
            raise DataError("checkpoint does not match the dataset's classes or dimensions")
        augmenters[args.generator_name] = generator_augmenter(params, data.length)
    results = []
    for seed in seeds:
        split = split_subject_independent(data, fractions, seed)
        results += run_experiment(data, split, augmenters, dataset_name=args.name, seed=seed)
    write_results_csv(results, args.output)
    table = score_generators(results)
    if args.scores:
        Path(args.scores).write_text(table.to_json() + "\n")
    print(table.to_text())
    return 0


# --------------------------------------------------------------- bench-sdtw


def cmd_bench_sdtw(args) -> int:
    from .sdtw import SdtwBatch, default_workers

    workers = args.workers or default_workers()
    rng = np.random.default_rng(args.seed)
    A = rng.uniform(-1, 1, size=(args.batch, args.dims, args.length))
    B = rng.uniform(-1, 1, size=(args.batch, args.dims, args.length))
    idx = np.arange(args.batch)

    def run(parallel):
        t0 = time.perf_counter()
        b = SdtwBatch(A, B, idx, idx, args.kind, args.gamma, parallel, workers)
        g = b.gradients()
        return b.values, g, time.perf_counter() - t0

    run(False), run(True)  # compile and warm up
    v_s, g_s, t_s = run(False)
    v_p, g_p, t_p = run(True)
    diff = max(float(np.max(np.abs(v_s - v_p), initial=0.0)), float(np.max(np.abs(g_s - g_p), initial=0.0)))
    if diff > 1e-10:
        raise NumericError(f"serial and parallel results disagree by {diff:.3g}; refusing to report timings")
    rows = [
        ("serial", 1, t_s),
        ("parallel", workers, t_p),
    ]
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for mode, wk, t in rows:
            w.writerow([args.batch, args.length, args.dims, mode, wk, f"{t * 1e3:.3f}", f"{args.batch / t:.1f}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"nag: error: usage: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nag", description="Non-adversarial recurrent gesture generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="resample, normalize and relabel a gesture file")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    s.add_argument("--length", type=int, default=64)
    s.add_argument("--output", required=True)
    s.add_argument("--report", help="write rejected gestures as JSON here")
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("make-toy", help="write the synthetic lines/circles/zigzags set as raw CSV")
    s.add_argument("--output", required=True)
    s.add_argument("--per-class", type=int, default=32)
    s.add_argument("--subjects", type=int, default=8)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_make_toy)

    s = sub.add_parser("train", help="train a generator")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", help="sample gestures of one class")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="class_id", type=int, required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.add_argument("--length", type=int)
    s.add_argument("--output", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("export-svg", help="render a gesture file as an SVG grid")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--columns", type=int, default=8)
    s.set_defaults(fn=cmd_export_svg)

    s = sub.add_parser("eval-augment", help="baseline vs augmented 1-NN DTW recognition")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--generator-name", default="nag")
    s.add_argument("--name", default="dataset")
    s.add_argument("--seeds", default="0")
    s.add_argument("--fractions", default="0.5,0.2,0.3")
    s.add_argument("--noise-magnitude", type=float, default=0.02)
    s.add_argument("--output", required=True)
    s.add_argument("--scores")
    s.set_defaults(fn=cmd_eval_augment)

    s = sub.add_parser("bench-sdtw", help="time serial vs parallel soft-DTW")
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--length", type=int, default=64)
    s.add_argument("--dims", type=int, default=3)
    s.add_argument("--workers", type=int, default=0)
    s.add_argument("--gamma", type=float, default=0.1)
    s.add_argument("--kind", choices=("ED", "COS"), default="ED")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output")
    s.set_defaults(fn=cmd_bench_sdtw)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"nag: error: usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"nag: error: numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as e:
        print(f"nag: error: data: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
