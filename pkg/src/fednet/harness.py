"""Training loop, two-stage inference, evaluation, the ablation grid, and the
gradient-check suite.

Everything here is deterministic for a given (config, seed): data sampling,
augmentation, initialization and batch order are all driven by streams
derived from the config seed, so identical runs produce byte-identical
checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import checkpoint, ops
from .blocks import (DUC, RCB, DecoderBlock, Encoder, FeatureFusion, FedNet,
                     NetworkSpec, SEBlock)
from .config import TrainConfig
from .losses import LossWeights, combined_loss, dice, dice_global, dice_per_case
from .pipeline import (bbox_of_mask, flip_augment, hierarchical_postprocess,
                       hu_window_normalize, largest_component, sample_slices,
                       stack_adjacent_slices, threshold_mask)
from .tensor import (Tape, Tensor, backward, clip_gradients, grad_check,
                     sgd_step)
from .volume import Volume, read_mvol

CT_SUFFIX = "_ct.mvol"
SEG_SUFFIX = "_seg.mvol"


class TrainingDiverged(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class MetricsReport:
    per_case_dice: float
    global_dice: float
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    runtime_seconds: float = 0.0

    def lines(self) -> str:
        """Tab-separated ``name<TAB>value`` report for machine parsing."""
        rows = [
            ("per_case_dice", f"{self.per_case_dice:.6f}"),
            ("global_dice", f"{self.global_dice:.6f}"),
            ("runtime_seconds", f"{self.runtime_seconds:.3f}"),
        ]
        if self.loss_curve:
            rows.append(("loss_first", f"{self.loss_curve[0][1]:.6f}"))
            rows.append(("loss_last", f"{self.loss_curve[-1][1]:.6f}"))
        return "\n".join(f"{k}\t{v}" for k, v in rows)


# ---------------------------------------------------------------------------
# Dataset handling
# ---------------------------------------------------------------------------


def load_dataset(data_dir) -> list[tuple[str, Volume, Volume]]:
    """Load (name, ct, seg) triples from ``data_dir``; pairs are
    ``<name>_ct.mvol`` / ``<name>_seg.mvol``, returned in sorted name order."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DatasetError(f"data directory {data_dir!r} does not exist")
    out = []
    for ct_path in sorted(root.glob(f"*{CT_SUFFIX}")):
        name = ct_path.name[:-len(CT_SUFFIX)]
        seg_path = root / f"{name}{SEG_SUFFIX}"
        if not seg_path.exists():
            raise DatasetError(f"missing segmentation for {ct_path.name}")
        ct = read_mvol(ct_path)
        seg = read_mvol(seg_path)
        if ct.voxels.shape != seg.voxels.shape:
            raise DatasetError(f"{name}: ct and seg dims differ")
        out.append((name, ct, seg))
    if not out:
        raise DatasetError(f"no *{CT_SUFFIX} volumes found in {data_dir!r}")
    return out


def stage_targets(seg: np.ndarray, stage: str):
    """(target, eligible) slice selection for a training stage.

    Liver stage: every slice is eligible and the target is any organ label.
    Lesion stage: only liver-containing slices are eligible and the target is
    the lesion label.
    """
    if stage == "liver":
        target = (seg >= 1).astype(np.uint8)
        eligible = np.ones(seg.shape[0], dtype=bool)
    elif stage == "lesion":
        target = (seg == 2).astype(np.uint8)
        eligible = (seg >= 1).any(axis=(1, 2))
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return target, eligible


def _crop_to_bbox_multiple32(image: np.ndarray, target: np.ndarray, box,
                             out_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Crop [C,H,W] slices to the in-plane bbox, zero-padded up to ``out_hw``
    (a common dataset-wide shape so batches can be stacked)."""
    _, y0, x0 = box.lo
    _, y1, x1 = box.hi
    image = image[:, y0:y1 + 1, x0:x1 + 1]
    target = target[:, y0:y1 + 1, x0:x1 + 1]
    pad_h = out_hw[0] - image.shape[1]
    pad_w = out_hw[1] - image.shape[2]
    if pad_h or pad_w:
        spec = ((0, 0), (0, pad_h), (0, pad_w))
        image = np.pad(image, spec)
        target = np.pad(target, spec)
    return image, target


def _sample_stream(volumes, cfg: TrainConfig, aug_rng: np.random.Generator) -> Iterator:
    """Endless deterministic stream of augmented samples.

    Each epoch re-runs the per-volume Bernoulli sampling with a seed derived
    from (config seed, epoch, volume index); within an epoch the order is
    volumes sorted by name, slices ascending.
    """
    prepared = []
    for name, ct, seg in volumes:
        norm = hu_window_normalize(ct.voxels)
        target, eligible = stage_targets(seg.voxels, cfg.stage)
        box = None
        if cfg.crop_to_liver_bbox and cfg.stage == "lesion" and (seg.voxels >= 1).any():
            box = bbox_of_mask((seg.voxels >= 1).astype(np.uint8))
        prepared.append((norm, target, eligible, box))

    # common crop shape (multiple of 32) so batches stack across volumes
    crop_hw = None
    boxes = [box for _, _, _, box in prepared if box is not None]
    if boxes:
        max_h = max(box.hi[1] - box.lo[1] + 1 for box in boxes)
        max_w = max(box.hi[2] - box.lo[2] + 1 for box in boxes)
        crop_hw = (max_h + (-max_h) % 32, max_w + (-max_w) % 32)

    epoch = 0
    empty_epochs = 0
    while True:
        produced = 0
        for vol_idx, (norm, target, eligible, box) in enumerate(prepared):
            seed = np.random.SeedSequence([cfg.seed, epoch, vol_idx])
            for sample in sample_slices(norm, target, seed, cfg.p_pos, cfg.p_neg, eligible):
                if box is not None:
                    image, tgt = _crop_to_bbox_multiple32(sample.image, sample.target,
                                                          box, crop_hw)
                    sample = replace(sample, image=image, target=tgt)
                sample = flip_augment(sample, aug_rng)
                produced += 1
                yield sample
        empty_epochs = empty_epochs + 1 if produced == 0 else 0
        if empty_epochs >= 8:
            raise DatasetError("sampling produced no slices for 8 consecutive epochs")
        epoch += 1


def _shuffled(stream: Iterator, buffer_size: int, seed) -> Iterator:
    if buffer_size <= 0:
        yield from stream
        return
    rng = np.random.default_rng(seed)
    buf = []
    for item in stream:
        buf.append(item)
        if len(buf) > buffer_size:
            yield buf.pop(int(rng.integers(len(buf))))
    while buf:
        yield buf.pop(int(rng.integers(len(buf))))


def build_network(cfg: TrainConfig, stage: Optional[str] = None,
                  dtype=np.float32) -> FedNet:
    """Network for a stage: the liver stage uses the baseline (all ablation
    flags off), the lesion stage uses the configured flags."""
    stage = stage or cfg.stage
    spec = cfg.network.baseline() if stage == "liver" else cfg.network
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF0]))
    return FedNet(spec, rng=init_rng, dtype=dtype)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(cfg: TrainConfig, save: bool = True) -> tuple[dict[str, np.ndarray], MetricsReport]:
    """Run the configured number of SGD iterations and report training-set
    Dice.  Writes a FEDCKPT1 checkpoint (values + momentum) unless ``save``
    is False.  Aborts with :class:`TrainingDiverged` on a non-finite loss.
    """
    cfg.validate()
    started = time.perf_counter()
    volumes = load_dataset(cfg.data_dir)
    shapes = {ct.voxels.shape for _, ct, _ in volumes}
    if len(shapes) > 1 and not (cfg.crop_to_liver_bbox and cfg.stage == "lesion"):
        raise DatasetError(f"training batches need uniform volume dims, got {sorted(shapes)}")
    net = build_network(cfg)
    params = list(net.named_parameters().values())
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA0]))
    stream = _sample_stream(volumes, cfg, aug_rng)
    stream = _shuffled(stream, cfg.shuffle_buffer,
                       np.random.SeedSequence([cfg.seed, 0xB0]))

    curve: list[tuple[int, float]] = []
    for it in range(cfg.iterations):
        batch = [next(stream) for _ in range(cfg.batch_size)]
        xb = Tensor(np.stack([s.image for s in batch]))
        yb = Tensor(np.stack([s.target for s in batch]))
        with Tape() as tape:
            probs = net(xb)
            loss = combined_loss(yb, probs, cfg.loss, per_slice=cfg.jaccard_per_slice)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        backward(loss, tape)
        clip_gradients(params, cfg.grad_clip)
        sgd_step(params, cfg.lr, cfg.momentum, cfg.weight_decay)
        curve.append((it, value))

    arrays = checkpoint.state_arrays(net)
    if save:
        checkpoint.save_checkpoint(cfg.checkpoint_out, arrays)

    per_case, global_ = training_set_dice(net, volumes, cfg)
    report = MetricsReport(per_case, global_, curve, time.perf_counter() - started)
    return arrays, report


def predict_volume(net: FedNet, norm: np.ndarray, z_indices: Sequence[int],
                   batch_size: int = 8) -> np.ndarray:
    """Per-slice probabilities over the listed z indices; other slices are 0."""
    probs = np.zeros(norm.shape, dtype=np.float32)
    z_indices = list(z_indices)
    for start in range(0, len(z_indices), batch_size):
        chunk = z_indices[start:start + batch_size]
        xb = Tensor(np.stack([stack_adjacent_slices(norm, z) for z in chunk]))
        out = net(xb).data[:, 0]
        for z, sl in zip(chunk, out):
            probs[z] = sl
    return probs


def training_set_dice(net: FedNet, volumes, cfg: TrainConfig) -> tuple[float, float]:
    """Stage-appropriate Dice of the network against its training targets.

    Lesion stage: predictions on ground-truth liver slices thresholded at the
    lesion threshold versus the lesion labels.  Liver stage: predictions on
    all slices at the liver threshold versus the organ labels.
    """
    threshold = cfg.liver_threshold if cfg.stage == "liver" else cfg.lesion_threshold
    cases = []
    for _, ct, seg in volumes:
        norm = hu_window_normalize(ct.voxels)
        target, eligible = stage_targets(seg.voxels, cfg.stage)
        probs = predict_volume(net, norm, np.nonzero(eligible)[0])
        cases.append((threshold_mask(probs, threshold), target))
    return dice_per_case(cases), dice_global(cases)


# ---------------------------------------------------------------------------
# Two-stage inference and evaluation
# ---------------------------------------------------------------------------


def infer(cfg: TrainConfig, liver_ckpt, lesion_ckpt, volume: Volume) -> Volume:
    """Two-stage segmentation of one CT volume.

    Stage 1 runs the baseline liver network on every slice; the thresholded
    largest component selects the slices the lesion network sees.  The final
    mask is the lesion mask restricted to the liver bounding box; an empty
    liver yields an empty mask.
    """
    liver_net = build_network(cfg, stage="liver")
    checkpoint.load_parameters(liver_net, checkpoint.load_checkpoint(liver_ckpt))
    lesion_net = build_network(cfg, stage="lesion")
    checkpoint.load_parameters(lesion_net, checkpoint.load_checkpoint(lesion_ckpt))

    norm = hu_window_normalize(volume.voxels)
    liver_prob = predict_volume(liver_net, norm, range(norm.shape[0]),
                                batch_size=max(cfg.batch_size, 8))
    liver_mask = largest_component(threshold_mask(liver_prob, cfg.liver_threshold),
                                   cfg.connectivity)
    lesion_prob = np.zeros(norm.shape, dtype=np.float32)
    liver_z = np.nonzero(liver_mask.any(axis=(1, 2)))[0]
    if liver_z.size:
        lesion_prob = predict_volume(lesion_net, norm, liver_z,
                                     batch_size=max(cfg.batch_size, 8))
    final = hierarchical_postprocess(liver_prob, lesion_prob, cfg.liver_threshold,
                                     cfg.lesion_threshold, cfg.connectivity)
    return Volume(final, volume.spacing)


def evaluate(pred_dir, gt_dir, gt_label: Optional[int] = None) -> MetricsReport:
    """Per-case and pooled Dice over matching ``*.mvol`` files in two
    directories.  ``gt_label`` selects one ground-truth label as foreground;
    by default any nonzero voxel is foreground."""
    started = time.perf_counter()
    pred_root, gt_root = Path(pred_dir), Path(gt_dir)
    preds = {p.name: p for p in sorted(pred_root.glob("*.mvol"))}
    gts = {p.name: p for p in sorted(gt_root.glob("*.mvol"))}
    if not preds:
        raise DatasetError(f"no .mvol files in {pred_dir!r}")
    unpaired = sorted(set(preds) ^ set(gts))
    if unpaired:
        raise DatasetError(f"unpaired files between {pred_dir!r} and {gt_dir!r}: {unpaired}")
    cases = []
    for name in sorted(preds):
        pv = read_mvol(preds[name]).voxels
        gv = read_mvol(gts[name]).voxels
        gt_mask = (gv == gt_label) if gt_label is not None else (gv != 0)
        cases.append(((pv != 0), gt_mask))
    return MetricsReport(dice_per_case(cases), dice_global(cases),
                         runtime_seconds=time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("Baseline", dict(enable_rcb=False, enable_ff=False, enable_se=False, enable_duc=False)),
    ("Baseline + RCB", dict(enable_rcb=True, enable_ff=False, enable_se=False, enable_duc=False)),
    ("Baseline + FF", dict(enable_rcb=False, enable_ff=True, enable_se=False, enable_duc=False)),
    ("Baseline + FF with SE-Block",
     dict(enable_rcb=False, enable_ff=True, enable_se=True, enable_duc=False)),
    ("Baseline + DUC", dict(enable_rcb=False, enable_ff=False, enable_se=False, enable_duc=True)),
    ("Baseline + RCB + FF + DUC",
     dict(enable_rcb=True, enable_ff=True, enable_se=True, enable_duc=True)),
]


def ablate(cfg: TrainConfig) -> tuple[list[tuple[str, float, float]], str]:
    """Train and evaluate the six flag combinations from one shared seed and
    dataset; returns the rows and a tab-separated table."""
    rows = []
    for label, flags in ABLATION_ROWS:
        variant = replace(cfg, stage="lesion", network=replace(cfg.network, **flags))
        _, report = train(variant, save=False)
        rows.append((label, report.per_case_dice, report.global_dice))
    lines = ["Model\tPer case\tGlobal"]
    lines += [f"{label}\t{pc:.4f}\t{gl:.4f}" for label, pc, gl in rows]
    return rows, "\n".join(lines)


# ---------------------------------------------------------------------------
# Gradient-check suite
# ---------------------------------------------------------------------------


@dataclass
class SuiteCheck:
    name: str
    max_rel_err: float
    passed: bool


def _suite_rng(tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([0xC0FFEE, tag]))


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=False)


def gradcheck_suite(names: Optional[Sequence[str]] = None, tol: float = 1e-4
                    ) -> list[SuiteCheck]:
    """Finite-difference checks for every differentiable op and composite
    block at verification precision.  ``names`` filters the checks to run."""
    f64 = np.float64
    toy = NetworkSpec(base_channels=4, se_reduction=4)

    def conv_input():
        rng = _suite_rng(1)
        w, b = _rand(rng, (4, 3, 3, 3)), _rand(rng, (4,))
        x = Tensor(rng.uniform(-1, 1, (2, 3, 6, 7)), requires_grad=True)
        return lambda t: ops.conv2d(t, w, b, 1, 1), x

    def conv_weight():
        rng = _suite_rng(2)
        x, b = _rand(rng, (2, 3, 6, 6)), _rand(rng, (4,))
        w = Tensor(rng.uniform(-1, 1, (4, 3, 3, 3)), requires_grad=True)
        return lambda t: ops.conv2d(x, t, b, 2, 1), w

    def convt_input():
        rng = _suite_rng(3)
        w, b = _rand(rng, (3, 4, 2, 2)), _rand(rng, (4,))
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 5)), requires_grad=True)
        return lambda t: ops.conv_transpose2d(t, w, b, 2, 0), x

    def convt_weight():
        rng = _suite_rng(4)
        x, b = _rand(rng, (2, 3, 4, 4)), _rand(rng, (4,))
        w = Tensor(rng.uniform(-1, 1, (3, 4, 3, 3)), requires_grad=True)
        return lambda t: ops.conv_transpose2d(x, t, b, 2, 1), w

    def dense_input():
        rng = _suite_rng(5)
        w, b = _rand(rng, (5, 4)), _rand(rng, (5,))
        x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        return lambda t: ops.dense(t, w, b), x

    def dense_weight():
        rng = _suite_rng(6)
        x, b = _rand(rng, (3, 4)), _rand(rng, (5,))
        w = Tensor(rng.uniform(-1, 1, (5, 4)), requires_grad=True)
        return lambda t: ops.dense(x, t, b), w

    def relu_check():
        rng = _suite_rng(7)
        # keep inputs away from the kink so central differences are valid
        mag = rng.uniform(0.1, 1.0, (2, 3, 5, 5))
        sign = rng.choice([-1.0, 1.0], size=mag.shape)
        x = Tensor(mag * sign, requires_grad=True)
        return lambda t: ops.relu(t), x

    def sigmoid_check():
        rng = _suite_rng(8)
        x = Tensor(rng.uniform(-4, 4, (2, 3, 4, 4)), requires_grad=True)
        return lambda t: ops.sigmoid(t), x

    def gap_check():
        rng = _suite_rng(9)
        x = Tensor(rng.uniform(-1, 1, (2, 4, 5, 3)), requires_grad=True)
        return lambda t: ops.global_avg_pool(t), x

    def upsample_check():
        rng = _suite_rng(10)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 5)), requires_grad=True)
        return lambda t: ops.upsample_nearest(t, 3), x

    def shuffle_check():
        rng = _suite_rng(11)
        x = Tensor(rng.uniform(-1, 1, (2, 8, 3, 4)), requires_grad=True)
        return lambda t: ops.pixel_shuffle(t, 2), x

    def se_check():
        rng = _suite_rng(12)
        block = SEBlock(8, 4, rng, dtype=f64)
        x = Tensor(rng.uniform(-1, 1, (2, 8, 4, 4)), requires_grad=True)
        return lambda t: block(t), x

    def rcb_check():
        rng = _suite_rng(13)
        block = RCB(4, rng, dtype=f64)
        x = Tensor(rng.uniform(0.05, 1.0, (2, 4, 5, 5)), requires_grad=True)
        return lambda t: block(t), x

    def fuse_check():
        rng = _suite_rng(14)
        block = FeatureFusion((4, 8), 4, True, rng, dtype=f64)
        hi = Tensor(rng.uniform(-1, 1, (1, 8, 2, 3)))
        x = Tensor(rng.uniform(-1, 1, (1, 4, 4, 6)), requires_grad=True)

        def f(t):
            fused = block([t, hi])
            # scalar combination with distinct weights so neither output hides;
            # means keep the functional O(1) for finite differences
            return fused[0].mean() + fused[1].mean() * 0.7

        return f, x

    def duc_check():
        rng = _suite_rng(15)
        block = DUC(4, 3, 2, rng, dtype=f64)
        x = Tensor(rng.uniform(-1, 1, (2, 4, 3, 4)), requires_grad=True)
        return lambda t: block(t), x

    def decoder_check():
        rng = _suite_rng(16)
        block = DecoderBlock(8, 4, rng, dtype=f64)
        x = Tensor(rng.uniform(-1, 1, (2, 8, 3, 3)), requires_grad=True)
        return lambda t: block(t), x

    def encoder_check():
        rng = _suite_rng(17)
        enc = Encoder(3, toy.channels_per_level, True, rng, dtype=f64)
        coeffs = (1.0, 0.7, 1.3, 0.9)

        def f(t):
            pyr = enc(t)
            acc = None
            for level, c in zip(pyr.levels, coeffs):
                term = level.mean() * c
                acc = term if acc is None else acc + term
            return acc

        x = Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)), requires_grad=True)
        return f, x

    def fednet_check():
        rng = _suite_rng(18)
        net = FedNet(toy, rng=rng, dtype=f64)
        x = Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)), requires_grad=True)
        return lambda t: net(t), x

    def loss_check():
        rng = _suite_rng(19)
        y = Tensor(rng.integers(0, 2, (2, 1, 5, 5)).astype(f64))
        w = LossWeights()
        x = Tensor(rng.uniform(0.05, 0.95, (2, 1, 5, 5)), requires_grad=True)
        return lambda t: combined_loss(y, t, w), x

    registry = [
        ("conv2d/input", conv_input),
        ("conv2d/weight", conv_weight),
        ("conv_transpose2d/input", convt_input),
        ("conv_transpose2d/weight", convt_weight),
        ("dense/input", dense_input),
        ("dense/weight", dense_weight),
        ("relu", relu_check),
        ("sigmoid", sigmoid_check),
        ("global_avg_pool", gap_check),
        ("upsample_nearest", upsample_check),
        ("pixel_shuffle", shuffle_check),
        ("se_block", se_check),
        ("rcb", rcb_check),
        ("feature_fuse", fuse_check),
        ("duc_block", duc_check),
        ("decoder_block", decoder_check),
        ("encoder", encoder_check),
        ("fednet_forward", fednet_check),
        ("combined_loss", loss_check),
    ]
    results = []
    for name, builder in registry:
        if names is not None and name not in names:
            continue
        f, x = builder()
        report = grad_check(f, x, tol)
        results.append(SuiteCheck(name, report.max_rel_err, report.passed))
    return results
