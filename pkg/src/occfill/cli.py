"""Command-line pipeline wiring synthesis, prototypes, training and eval.

Every subcommand reads an optional flat key=value config file, applies flag
overrides, archives the exact resolved config next to its outputs, and is
bit-reproducible for a fixed seed.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .completion import (TrainConfig, copy_paste, generate, progressive_train,
                         read_model, rescore, train_scoring_head, write_model)
from .errors import OccfillError, PreconditionError
from .eval import (SUBSETS, Detection, EvalConfig, GroundTruth,
                   PROBE_MIN_SAMPLES, compactness_ratio, log_avg_miss_rate,
                   mask_iou, probe_accuracy, subset_of)
from .ndnum import Rng
from .occlusion import (OcclusionConfig, channel_correlation, correlation_map,
                        completion_mask, is_occluded, occluded_cells)
from .prototypes import (FULLY_VISIBLE, FeaturePool, build_pool, kmeans,
                         nearest_prototype, read_bank, write_bank)
from .synth import (MASK_PATTERNS, PEDESTRIAN, WorldConfig, gen_background,
                    gen_occluded, gen_pedestrian, gen_world, read_dataset,
                    sample_mask, sample_scale, write_dataset)

LOG = logging.getLogger("occfill")

EXIT_OK = 0
EXIT_PRECONDITION = 2
EXIT_IO = 3


# ---------------------------------------------------------------------------
# Run configuration: one flat namespace covering every pipeline stage.

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    channels: int = 16
    grid_x: int = 7
    grid_y: int = 7
    sigma_id: float = 0.05
    train_visible: int = 800
    train_occluded: int = 300
    train_background: int = 300
    eval_pedestrians: int = 500
    eval_background: int = 500
    proposals_per_image: int = 10
    proto_k: int = 5
    proto_restarts: int = 5
    alpha: float = 0.30
    beta_mode: str = "dynamic-mean"
    beta: float = 0.0
    stage1_iterations: int = 2000
    stage1_disc_steps: int = 1
    stage1_batch_size: int = 32
    stage1_learn_rate: float = 2e-3
    stage2_iterations: int = 2000
    stage2_disc_steps: int = 1
    stage2_batch_size: int = 32
    stage2_learn_rate: float = 2e-4
    head_iterations: int = 500
    head_learn_rate: float = 0.5
    fppi_count: int = 9

    def world_config(self):
        return WorldConfig(channels=self.channels, grid_x=self.grid_x,
                           grid_y=self.grid_y, sigma_id=self.sigma_id,
                           seed=self.seed)

    def occ_config(self):
        return OcclusionConfig(alpha=self.alpha, beta_mode=self.beta_mode,
                               beta=self.beta)

    def stage_configs(self):
        return (TrainConfig("synthetic", self.stage1_iterations,
                            self.stage1_disc_steps, self.stage1_batch_size,
                            self.stage1_learn_rate),
                TrainConfig("real", self.stage2_iterations,
                            self.stage2_disc_steps, self.stage2_batch_size,
                            self.stage2_learn_rate))

    def eval_config(self):
        return EvalConfig(fppi_points=tuple(
            float(v) for v in np.logspace(-2.0, 0.0, self.fppi_count)))

    def validate(self):
        if not (0 <= self.seed < 2 ** 64):
            raise PreconditionError("seed must fit an unsigned 64-bit integer")
        if self.threads < 1:
            raise PreconditionError("threads must be >= 1")
        counts = (self.train_visible, self.train_occluded, self.train_background,
                  self.eval_pedestrians, self.eval_background)
        if any(n < 0 for n in counts):
            raise PreconditionError("data counts must be non-negative")
        if self.proposals_per_image < 1:
            raise PreconditionError("data.proposals_per_image must be >= 1")
        if self.proto_k < 1 or self.proto_restarts < 1:
            raise PreconditionError("proto.k and proto.restarts must be >= 1")
        if self.head_iterations < 0 or self.head_learn_rate <= 0:
            raise PreconditionError(
                "head.iterations must be >= 0 and head.learn_rate positive")
        if self.fppi_count < 2:
            raise PreconditionError("eval.fppi_count must be >= 2")
        self.world_config().validate()
        self.occ_config().validate()
        for stage in self.stage_configs():
            stage.validate()
        self.eval_config().validate()
        return self


CONFIG_KEYS = {
    "seed": ("seed", int),
    "threads": ("threads", int),
    "world.channels": ("channels", int),
    "world.grid_x": ("grid_x", int),
    "world.grid_y": ("grid_y", int),
    "world.sigma_id": ("sigma_id", float),
    "data.train_visible": ("train_visible", int),
    "data.train_occluded": ("train_occluded", int),
    "data.train_background": ("train_background", int),
    "data.eval_pedestrians": ("eval_pedestrians", int),
    "data.eval_background": ("eval_background", int),
    "data.proposals_per_image": ("proposals_per_image", int),
    "proto.k": ("proto_k", int),
    "proto.restarts": ("proto_restarts", int),
    "occ.alpha": ("alpha", float),
    "occ.beta_mode": ("beta_mode", str),
    "occ.beta": ("beta", float),
    "train1.iterations": ("stage1_iterations", int),
    "train1.disc_steps": ("stage1_disc_steps", int),
    "train1.batch_size": ("stage1_batch_size", int),
    "train1.learn_rate": ("stage1_learn_rate", float),
    "train2.iterations": ("stage2_iterations", int),
    "train2.disc_steps": ("stage2_disc_steps", int),
    "train2.batch_size": ("stage2_batch_size", int),
    "train2.learn_rate": ("stage2_learn_rate", float),
    "head.iterations": ("head_iterations", int),
    "head.learn_rate": ("head_learn_rate", float),
    "eval.fppi_count": ("fppi_count", int),
}


def parse_config_text(text):
    """key=value lines into a mapping; blank lines and # comments skipped."""
    mapping = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise PreconditionError(
                f"config line {number}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in mapping:
            raise PreconditionError(f"config line {number}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def config_from_mapping(mapping):
    values = {}
    for key, raw in mapping.items():
        if key not in CONFIG_KEYS:
            raise PreconditionError(f"unknown config key {key!r}")
        field, convert = CONFIG_KEYS[key]
        try:
            values[field] = convert(raw)
        except ValueError as exc:
            raise PreconditionError(f"config key {key}: {exc}") from exc
    return RunConfig(**values)


def config_to_text(config):
    """Canonical archive form; floats via repr so parsing round-trips exactly."""
    lines = []
    for key, (field, _) in CONFIG_KEYS.items():
        value = getattr(config, field)
        lines.append(f"{key}={repr(value) if isinstance(value, float) else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Pipeline stages, importable without going through the argument parser.

def synthesize(config):
    """Draw the train and eval proposal sets plus a manifest of counts."""
    world = gen_world(config.world_config())
    root = Rng(config.seed)

    def pedestrians(rng, n, start_id, occlude):
        out = []
        for i in range(n):
            pr = rng.split(f"p{i}")
            base = gen_pedestrian(world, sample_scale(world, pr), pr,
                                  pid=start_id + i)
            if occlude == "always" or (occlude == "half" and i % 2 == 1):
                pattern = MASK_PATTERNS[int(pr.integers(0, len(MASK_PATTERNS)))]
                mask = sample_mask(world, pattern, pr)
                kind = "object" if pr.random() < 0.5 else "pedestrian"
                base = gen_occluded(world, base, mask, kind, pr)
            out.append(base)
        return out

    def backgrounds(rng, n, start_id):
        return [gen_background(world, rng.split(f"p{i}"), pid=start_id + i)
                for i in range(n)]

    train = pedestrians(root.split("train-visible"), config.train_visible,
                        0, "never")
    train += pedestrians(root.split("train-occluded"), config.train_occluded,
                         len(train), "always")
    train += backgrounds(root.split("train-background"),
                         config.train_background, len(train))
    eval_set = pedestrians(root.split("eval-pedestrians"),
                           config.eval_pedestrians, 0, "half")
    eval_set += backgrounds(root.split("eval-background"),
                            config.eval_background, len(eval_set))

    def counts(proposals):
        tally = {"pedestrian": 0, "background": 0, "R": 0, "HO": 0, "R+HO": 0}
        for p in proposals:
            tally[p.label] += 1
            if p.label == PEDESTRIAN:
                for name in subset_of(p.visibility):
                    tally[name] += 1
        tally["total"] = len(proposals)
        return tally

    manifest = {"seed": config.seed, "dims": list(world.dims),
                "proposals_per_image": config.proposals_per_image,
                "train": counts(train), "eval": counts(eval_set)}
    for part in (manifest["train"], manifest["eval"]):
        part["images"] = -(-part["total"] // config.proposals_per_image)
    return train, eval_set, manifest


@dataclass
class ProposalReport:
    """Everything the occlusion and completion stages say about one sample."""

    prototype: object
    cmap: object
    flagged: object
    mask: object
    occluded: bool
    completed: np.ndarray | None


def complete_proposal(features, scale, bank, gen, occ_config):
    """Flag, mask and (when warranted) complete one proposal's features.

    A proposal only counts as occluded when the alpha rule fires and the
    completion mask is non-empty: with nothing to overwrite there are no
    completed features to rescore on, so the sample passes through.
    """
    proto = nearest_prototype(bank, float(scale))
    cmap = correlation_map(features, proto.center)
    flagged = occluded_cells(cmap)
    mask = completion_mask(cmap, occ_config)
    occluded = is_occluded(flagged, occ_config) and mask.count > 0
    completed = None
    if occluded:
        completed = generate(gen, copy_paste(features, proto.center, mask))
    return ProposalReport(proto, cmap, flagged, mask, occluded, completed)


def _ped_pools(proposals):
    visible = build_pool(proposals)
    occluded = [p for p in proposals
                if p.label == PEDESTRIAN and p.visibility < FULLY_VISIBLE]
    if not occluded:
        raise PreconditionError("training dataset holds no occluded pedestrians")
    features = np.stack([p.features for p in occluded])
    scales = np.array([p.scale for p in occluded], dtype=np.float64)
    return visible, FeaturePool(features, scales), occluded


def train_model(proposals, bank, config):
    """Progressive adversarial training plus the rescoring head.

    The head is fit on completed features, the distribution it scores at
    eval time: completed occluded pedestrians against completed backgrounds.
    """
    visible, occ_pool, _ = _ped_pools(proposals)
    occ_config = config.occ_config()
    world = gen_world(config.world_config())
    rng = Rng(config.seed)
    gen, disc, history = progressive_train(
        visible, occ_pool, bank, occ_config, config.stage_configs(),
        rng.split("train"), mask_world=world)
    LOG.info("adversarial training done (%d iterations)", len(history))

    positives, negatives = [], []
    for p in proposals:
        if p.label == PEDESTRIAN and p.visibility >= FULLY_VISIBLE:
            continue
        report = complete_proposal(p.features, p.scale, bank, gen, occ_config)
        if not report.occluded:
            continue
        (positives if p.label == PEDESTRIAN else negatives).append(report.completed)
    if not positives or not negatives:
        raise PreconditionError("no completed samples to fit the scoring head on")
    head = train_scoring_head(np.stack(positives), np.stack(negatives),
                              rng.split("head"), iterations=config.head_iterations,
                              learn_rate=config.head_learn_rate)
    LOG.info("scoring head fit on %d positives / %d negatives",
             len(positives), len(negatives))
    return gen, disc, head, history


def evaluate(proposals, bank, gen, head, config):
    """Baseline vs completed miss rates per subset, plus diagnostics.

    Proposals are treated as coming from synthetic frames holding
    `proposals_per_image` candidates each, so FPPI budgets stay meaningful
    even though every background proposal is a potential false positive.
    """
    occ_config = config.occ_config()
    eval_config = config.eval_config()
    images = -(-len(proposals) // config.proposals_per_image)
    truths, baseline, completed_dets = [], [], []
    raw_occ, comp_occ, vis_feats, ious = [], [], [], []
    for p in proposals:
        report = complete_proposal(p.features, p.scale, bank, gen, occ_config)
        score = rescore(p, report.completed, head, report.occluded)
        baseline.append(Detection(p.id, p.score))
        completed_dets.append(Detection(p.id, float(score)))
        if p.label != PEDESTRIAN:
            continue
        truths.append(GroundTruth(p.id, p.visibility))
        if p.true_mask is None:
            vis_feats.append(p.features)
        else:
            ious.append(mask_iou(report.mask, p.true_mask))
            raw_occ.append(p.features)
            comp_occ.append(report.completed if report.occluded else p.features)

    diagnostics = {"images": images,
                   "mean_mask_iou": float(np.mean(ious)) if ious else float("nan"),
                   "compactness_ratio": float("nan"),
                   "probe_accuracy": float("nan")}
    if raw_occ and vis_feats:
        diagnostics["compactness_ratio"] = compactness_ratio(
            np.stack(raw_occ), np.stack(comp_occ), np.stack(vis_feats))
    if len(comp_occ) >= PROBE_MIN_SAMPLES and len(vis_feats) >= PROBE_MIN_SAMPLES:
        diagnostics["probe_accuracy"] = probe_accuracy(
            np.stack(comp_occ), np.stack(vis_feats), seed=config.seed)

    rows = []
    for subset in SUBSETS:
        mr_base = log_avg_miss_rate(baseline, truths, eval_config, subset,
                                    images=images)
        mr_comp = log_avg_miss_rate(completed_dets, truths, eval_config, subset,
                                    images=images)
        members = sum(1 for t in truths if subset in subset_of(t.visibility))
        rows.append({"subset": subset, "mr_baseline": mr_base,
                     "mr_completed": mr_comp, "delta_mr": mr_base - mr_comp,
                     "gt_count": members})
    return rows, diagnostics


# ---------------------------------------------------------------------------
# Output helpers. All file bytes are deterministic functions of their inputs.

def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "disc_objective", "gen_objective",
                         "disc_accuracy"])
        for iteration, disc_obj, gen_obj, accuracy in history:
            writer.writerow([int(iteration), repr(float(disc_obj)),
                             repr(float(gen_obj)), repr(float(accuracy))])


def _write_metrics(path, rows, diagnostics):
    columns = ["subset", "mr_baseline", "mr_completed", "delta_mr",
               "compactness_ratio", "probe_accuracy", "mean_mask_iou",
               "gt_count", "images"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row["subset"], repr(row["mr_baseline"]),
                             repr(row["mr_completed"]), repr(row["delta_mr"]),
                             repr(float(diagnostics["compactness_ratio"])),
                             repr(float(diagnostics["probe_accuracy"])),
                             repr(float(diagnostics["mean_mask_iou"])),
                             row["gt_count"], diagnostics["images"]])


def _write_pgm(path, cells):
    """8-bit binary PGM; `cells` is a uint8-compatible 2-d array."""
    arr = np.ascontiguousarray(cells, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def _gray_scale(grid):
    arr = np.asarray(grid, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.full(arr.shape, 128, dtype=np.uint8)
    return np.rint((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _write_grid_csv(path, grid):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(grid, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Subcommands.

def _load_config(args):
    mapping = {}
    if args.config is not None:
        mapping = parse_config_text(Path(args.config).read_text())
    config = config_from_mapping(mapping)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.threads is not None:
        config = replace(config, threads=args.threads)
    config.validate()
    if config.threads > 1:
        LOG.info("threads=%d requested; stages run single-threaded "
                 "to stay deterministic", config.threads)
    return config


def _prepare_out(args, config):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(config))
    return out


def cmd_synth(args):
    config = _load_config(args)
    out = _prepare_out(args, config)
    train, eval_set, manifest = synthesize(config)
    dims = tuple(manifest["dims"])
    write_dataset(train, out / "train.fcds", dims=dims)
    write_dataset(eval_set, out / "eval.fcds", dims=dims)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ev = manifest["eval"]
    print(f"wrote {manifest['train']['total']} train / {ev['total']} eval "
          f"proposals to {out}")
    print(f"eval subsets: R={ev['R']} HO={ev['HO']} R+HO={ev['R+HO']} "
          f"background={ev['background']}")
    return EXIT_OK


def cmd_build_prototypes(args):
    config = _load_config(args)
    out = _prepare_out(args, config)
    pool = build_pool(read_dataset(args.data))
    bank = kmeans(pool, k=config.proto_k, seed=config.seed,
                  restarts=config.proto_restarts)
    write_bank(bank, out / "bank.fcpb")
    for i, proto in enumerate(bank.prototypes):
        print(f"cluster {i}: scale {proto.scale_mean:.2f} ± "
              f"{proto.scale_std:.2f} ({proto.member_count} members)")
    print(f"bank with {bank.k} prototypes written to {out / 'bank.fcpb'}")
    return EXIT_OK


def cmd_train(args):
    config = _load_config(args)
    out = _prepare_out(args, config)
    proposals = read_dataset(args.data)
    bank = read_bank(args.bank)
    gen, disc, head, history = train_model(proposals, bank, config)
    grid = bank.prototypes[0].center.shape[1:]
    write_model(out / "model.fcgd", gen, disc, head, config.stage_configs(), grid)
    _write_history(out / "history.csv", history)
    print(f"model written to {out / 'model.fcgd'} "
          f"({len(history)} iterations logged)")
    return EXIT_OK


def cmd_eval(args):
    config = _load_config(args)
    out = _prepare_out(args, config)
    proposals = read_dataset(args.data)
    bank = read_bank(args.bank)
    gen, _, head, _, _ = read_model(args.model)
    rows, diagnostics = evaluate(proposals, bank, gen, head, config)
    _write_metrics(out / "metrics.csv", rows, diagnostics)
    for row in rows:
        print(f"{row['subset']}: MR {row['mr_baseline']:.4f} -> "
              f"{row['mr_completed']:.4f} (delta {row['delta_mr']:+.4f})")
    print(f"metrics written to {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_inspect(args):
    config = _load_config(args)
    out = _prepare_out(args, config)
    proposals = read_dataset(args.data)
    bank = read_bank(args.bank)
    matches = [p for p in proposals if p.id == args.id]
    if not matches:
        raise PreconditionError(f"no proposal with id {args.id}")
    proposal = matches[0]
    proto = nearest_prototype(bank, proposal.scale)
    cmap = correlation_map(proposal.features, proto.center)
    flagged = occluded_cells(cmap)
    mask = completion_mask(cmap, config.occ_config())
    _write_pgm(out / "corr_map.pgm", _gray_scale(cmap.grid))
    _write_pgm(out / "mask.pgm", np.where(mask.grid, 255, 0))
    _write_grid_csv(out / "corr_map.csv", cmap.grid)
    for channel in range(proposal.features.shape[0]):
        grid = channel_correlation(proposal.features, proto.center, channel).grid
        _write_grid_csv(out / f"channel_{channel:02d}.csv", grid)
    verdict = is_occluded(flagged, config.occ_config())
    print(f"proposal {proposal.id}: label={proposal.label} "
          f"scale={proposal.scale:.2f} visibility={proposal.visibility:.2f}")
    print(f"nearest prototype scale {proto.scale_mean:.2f}; "
          f"flagged {flagged.count}/{flagged.grid.size} cells "
          f"({flagged.fraction():.2f}); occluded={verdict}")
    print(f"heatmaps written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point.

def _setup_logging():
    wanted = os.environ.get("FEATCOMP_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if wanted not in levels:
        sys.stderr.write(f"warning: unknown FEATCOMP_LOG value {wanted!r}; "
                         "using error\n")
    logging.basicConfig(stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    LOG.setLevel(levels.get(wanted, logging.ERROR))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="occfill",
        description="Occluded-pedestrian feature completion pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", type=Path, default=None,
                        help="flat key=value config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the run seed (unsigned 64-bit)")
        sp.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory (created if missing)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker cap; stages currently run single-threaded")

    sp = sub.add_parser("synth-data",
                        help="generate train/eval datasets plus a manifest")
    add_common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("build-prototypes",
                        help="cluster fully visible pedestrians into a bank")
    add_common(sp)
    sp.add_argument("--data", type=Path, required=True, help="train dataset file")
    sp.set_defaults(func=cmd_build_prototypes)

    sp = sub.add_parser("train",
                        help="progressive adversarial training plus rescoring head")
    add_common(sp)
    sp.add_argument("--data", type=Path, required=True, help="train dataset file")
    sp.add_argument("--bank", type=Path, required=True, help="prototype bank file")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval",
                        help="baseline vs completed miss rates on R/HO/R+HO")
    add_common(sp)
    sp.add_argument("--data", type=Path, required=True, help="eval dataset file")
    sp.add_argument("--bank", type=Path, required=True, help="prototype bank file")
    sp.add_argument("--model", type=Path, required=True, help="trained model file")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect",
                        help="dump correlation heatmaps for one proposal")
    add_common(sp)
    sp.add_argument("--data", type=Path, required=True, help="dataset file")
    sp.add_argument("--bank", type=Path, required=True, help="prototype bank file")
    sp.add_argument("--id", type=int, required=True, help="proposal id to inspect")
    sp.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_PRECONDITION
    try:
        return int(args.func(args))
    except OccfillError as exc:
        LOG.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
