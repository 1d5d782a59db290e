"""
Command-line driver: dataset generation, training, evaluation, ablations,
cost benchmark, rendering, gradient checks and the decode service.

Every subcommand returns a process exit code; 0 only when all of its
internal checks pass.
"""

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sparse
from pydantic import BaseModel, Field
from tqdm import tqdm

from pica import diffcore as dc
from pica.config import LossWeights, ModelConfig, RunConfig, Variant, load_run_config
from pica.diffcore import AdamState, Tape, Tensor, adam_step, backward, gradcheck
from pica.geometry import (
    MeshTopology,
    cotangent_laplacian,
    ema_update,
    make_grid_topology,
    neutral_target,
    sample_position_map,
    write_obj,
)
from pica.losses import (
    breakdown,
    depth_loss,
    image_loss,
    kl_loss,
    laplacian_weights,
    mesh_loss,
    mesh_mask,
    normal_loss,
    smoothness_loss,
    total_loss,
)
from pica.model import (
    PixelCodecAvatar,
    RenderResult,
    load_model,
    parse_variant,
    per_object_flops,
    per_pixel_flops,
    reparameterize,
    save_model,
    view_tile,
)
from pica.raster import Camera, rasterize, save_gbuffer_images
from pica.scenegen import VIEW_GROUPS, Dataset, DatasetError, FrameSample, orbit_camera, write_dataset, write_png

logger = logging.getLogger(__name__)

BENCH_DISTANCES = (180.0, 650.0, 1200.0)
AVATAR_SPACING_MM = 250.0
ABLATION_ORDER = ((Variant.FULL, Variant.NO_UV), (Variant.FULL, Variant.UV_NOPE), (Variant.FULL, Variant.COARSE))
# compared and reported, but not part of the pass/fail verdict
REPORTED_ORDER = (
    (Variant.FULL, Variant.NERF_PE),
    (Variant.FULL, Variant.PE_2D),
    (Variant.FULL, Variant.PE_1D),
    (Variant.FULL, Variant.BASELINE),
)


class TrainingDivergedError(RuntimeError):
    """a loss term or a gradient went non-finite; the last good state has been written"""

    def __init__(self, step: int, terms: Dict[str, float], checkpoint: Path, gradients: Sequence[str] = ()):
        detail = f"{terms}" + (f", non-finite gradients in {list(gradients)}" if gradients else "")
        super().__init__(f"training diverged at step {step}: {detail} (last good state: {checkpoint})")
        self.step = step
        self.terms = terms
        self.checkpoint = checkpoint
        self.gradients = list(gradients)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def chw(image: np.ndarray) -> np.ndarray:
    return np.transpose(image, (2, 0, 1))


def encode_sample(model: PixelCodecAvatar, sample: FrameSample) -> Tuple[Tensor, Tensor]:
    return model.encode(chw(sample.avg_texture), chw(sample.coarse_posmap))


def render_sample(model: PixelCodecAvatar, sample: FrameSample, camera: Camera,
                  variant: Optional[Variant] = None) -> RenderResult:
    """inference render with Z = mu"""
    mu, _ = encode_sample(model, sample)
    return model.render_frame(mu, camera, variant)


def to_8bit(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0)


def pixel_error_8bit(predicted: np.ndarray, target: np.ndarray, coverage: np.ndarray) -> Tuple[float, int]:
    """(sum of squared 8-bit differences, number of values) over covered pixels of H×W×3 images"""
    diff = to_8bit(predicted) - to_8bit(target)
    values = diff[coverage]
    return float(np.sum(values * values)), int(values.size)


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[f"{c:.4g}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _json_safe(terms: Dict[str, float]) -> Dict[str, Optional[float]]:
    return {k: (v if math.isfinite(v) else None) for k, v in terms.items()}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class Trainer:
    """
    One model, one dataset, Adam on the weighted objective.

    The regularisation target V_mu starts at the neutral mesh and follows the
    decoded meshes through ema_update after every step.
    """

    def __init__(self, run: RunConfig, dataset: Dataset, out_dir: Path, variant: Optional[Variant] = None):
        self.run = run
        self.cfg = run.train
        self.weights: LossWeights = run.train.weights
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        model_cfg = run.resolved_model()
        if variant is not None:
            model_cfg = model_cfg.model_copy(update={"variant": parse_variant(variant)})
        scene = dataset.config
        if model_cfg.posmap_resolution != scene.posmap_resolution:
            raise ValueError(
                f"model position map {model_cfg.posmap_resolution} does not match dataset {scene.posmap_resolution}"
            )
        self.model = PixelCodecAvatar(model_cfg, seed=self.cfg.seed)
        neutral = dataset.neutral_posmap()
        self.model.initialize_geometry(neutral)

        self.dense: MeshTopology = self.model.dense_topology
        self.coarse: MeshTopology = self.model.coarse_topology
        with dc.precision(np.float64):
            neutral_dense = sample_position_map(Tensor(neutral), self.dense).data
        self.laplacian: sparse.csr_matrix = cotangent_laplacian(self.dense, neutral_dense)
        self.target = neutral_target(neutral_dense, self.cfg.ema_rate)
        self.W_L = laplacian_weights(self.dense, scene.detail_center, scene.detail_radius)
        self.W_M = mesh_mask(self.coarse, scene.detail_center, scene.detail_radius)

        self.adam = AdamState.for_params(self.model.params)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.frames = dataset.frames("train")
        self.cameras = dataset.train_cameras()
        if not self.frames or not self.cameras:
            raise DatasetError(f"{dataset.root} has no training frames or cameras")
        self.step_count = 0

    def frame_terms(self, sample: FrameSample, camera_index: int, Z: Tensor) -> Tuple[Dict[str, Tensor], RenderResult]:
        camera = self.dataset.cameras[camera_index]
        result = self.model.render_frame(Z, camera)
        coverage = result.gbuffer.coverage
        terms: Dict[str, Tensor] = {}
        loss, has_pixels = image_loss(result.image, chw(sample.images[camera_index]), coverage)
        if has_pixels:
            terms["image"] = loss
        D = sample.depths[camera_index]
        if D is not None:
            terms["depth"], W_D = depth_loss(D, result.depth, coverage, self.weights.depth_gate_mm)
            terms["normal"] = normal_loss(D, result.depth, W_D, camera)
        terms["mesh"] = mesh_loss(result.position_map, sample.coarse_posmap, self.coarse, self.W_M)
        terms["smooth"] = smoothness_loss(
            result.position_map, self.dense, self.laplacian, self.W_L, self.target.v_mu,
            self.weights.lambda_g, self.weights.lambda_l,
        )
        return terms, result

    def step(self) -> Dict[str, float]:
        """one Adam step on a random batch of (frame, camera) pairs"""
        batch = [
            (self.frames[self.rng.integers(len(self.frames))], self.cameras[self.rng.integers(len(self.cameras))])
            for _ in range(self.cfg.batch_size)
        ]
        sums: Dict[str, Tensor] = {}
        counts: Dict[str, int] = {}
        mus, logvars, meshes = [], [], []
        with Tape() as tape:
            for frame, camera_index in batch:
                sample = self.dataset.load_frame(frame)
                mu, logvar = encode_sample(self.model, sample)
                Z = reparameterize(mu, logvar, self.rng)
                terms, result = self.frame_terms(sample, camera_index, Z)
                for name, value in terms.items():
                    sums[name] = sums[name] + value if name in sums else value
                    counts[name] = counts.get(name, 0) + 1
                mus.append(mu)
                logvars.append(logvar)
                meshes.append(sample_position_map(dc.stop_gradient(result.position_map), self.dense).data)
            parts = {name: value * (1.0 / counts[name]) for name, value in sums.items()}
            parts["kl"] = kl_loss(mus, logvars)
            total = total_loss(parts, self.weights)

        record = breakdown(parts)
        record["total"] = total.item()
        if not all(math.isfinite(v) for v in record.values()):
            self._diverged(record)
        grads = backward(tape, total)
        bad = [name for name, p in self.model.params.items() if not np.all(np.isfinite(grads[p]))]
        if bad:
            self._diverged(record, bad)
        adam_step(self.model.params, grads, self.adam, lr=self.cfg.learning_rate)
        self.target = ema_update(self.target, np.stack(meshes))
        self.step_count += 1
        return record

    def _diverged(self, record: Dict[str, float], gradients: Sequence[str] = ()):
        """parameters are still untouched by the failing step when this runs"""
        checkpoint = self.out_dir / "last_good.pica"
        save_model(checkpoint, self.model, self.target)
        step = self.step_count + 1
        dump = {
            "step": step,
            "terms": _json_safe(record),
            "non_finite_gradients": list(gradients),
            "checkpoint": str(checkpoint),
        }
        (self.out_dir / "divergence.json").write_text(json.dumps(dump, indent=2), encoding="utf-8")
        if gradients:
            logger.error(f"Non-finite gradients at step {step} in {len(gradients)} parameters: {list(gradients)[:5]}")
        else:
            logger.error(f"Non-finite loss at step {step}: {record}")
        raise TrainingDivergedError(step, record, checkpoint, gradients)

    def train(self, iterations: Optional[int] = None, progress: bool = True) -> Path:
        """run the loop, writing loss_log.jsonl and checkpoints; returns the final checkpoint"""
        iterations = iterations or self.cfg.iterations
        log_path = self.out_dir / "loss_log.jsonl"
        header = {
            "header": True,
            "weights": self.weights.model_dump(),
            "variant": self.model.variant.value,
            "seed": self.cfg.seed,
            "batch_size": self.cfg.batch_size,
            "learning_rate": self.cfg.learning_rate,
            "iterations": iterations,
        }
        started = time.perf_counter()
        with open(log_path, "w", encoding="utf-8") as log:
            log.write(json.dumps(header) + "\n")
            for it in tqdm(range(1, iterations + 1), desc=f"train[{self.model.variant.value}]", disable=not progress):
                record = self.step()
                line = {"step": it, **record}
                if not self.cfg.deterministic:
                    line["elapsed_s"] = round(time.perf_counter() - started, 3)
                log.write(json.dumps(line) + "\n")
                if it % self.cfg.log_every == 0:
                    logger.info(f"step {it}: total={record['total']:.5f}")
                if it % self.cfg.checkpoint_every == 0:
                    save_model(self.out_dir / f"step_{it:06d}.pica", self.model, self.target)
        final = self.out_dir / "final.pica"
        save_model(final, self.model, self.target)
        return final


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class ExpressionError(BaseModel):
    frame: int
    mse: float


class CoverageStats(BaseModel):
    mean: float = 0.0
    min: int = 0
    max: int = 0


class EvalReport(BaseModel):
    split: str
    variant: str
    n_images: int
    mse_overall: float
    mse_by_group: Dict[str, float]
    per_expression: List[ExpressionError]
    quartiles: List[float] = Field(default_factory=list)
    coverage: CoverageStats = Field(default_factory=CoverageStats)
    notes: List[str] = Field(default_factory=list)

    def table(self) -> str:
        rows = [[g, self.mse_by_group[g]] for g in VIEW_GROUPS if g in self.mse_by_group]
        rows.append(["All", self.mse_overall])
        text = format_table(["view", "MSE"], rows)
        if self.quartiles:
            q = ", ".join(f"{v:.3f}" for v in self.quartiles)
            text += f"\nper-expression MSE quartiles (25/50/75): {q}"
        return text


def evaluate(model: PixelCodecAvatar, dataset: Dataset, split: str = "test") -> EvalReport:
    """8-bit MSE over covered pixels per view group and per expression, with Z = mu"""
    frames = dataset.frames(split)
    notes: List[str] = []
    if not frames:
        raise DatasetError(f"split '{split}' of {dataset.root} is empty")
    group_sums: Dict[str, List[float]] = {}
    frame_errors: List[ExpressionError] = []
    coverages: List[int] = []
    total = [0.0, 0]
    for frame in frames:
        sample = dataset.load_frame(frame)
        mu, _ = encode_sample(model, sample)
        frame_acc = [0.0, 0]
        for c, camera in enumerate(dataset.cameras):
            result = model.render_frame(mu, camera)
            coverage = result.gbuffer.coverage
            coverages.append(int(coverage.sum()))
            sq, n = pixel_error_8bit(result.image_array(), sample.images[c], coverage)
            acc = group_sums.setdefault(dataset.groups[c], [0.0, 0])
            for bucket in (acc, frame_acc, total):
                bucket[0] += sq
                bucket[1] += n
        frame_errors.append(ExpressionError(frame=frame, mse=frame_acc[0] / max(frame_acc[1], 1)))

    by_group = {g: s / n for g, (s, n) in group_sums.items() if n > 0}
    for g in VIEW_GROUPS:
        if g not in by_group:
            notes.append(f"view group {g} has no covered pixels in this split; omitted")
    frame_errors.sort(key=lambda e: -e.mse)
    mses = [e.mse for e in frame_errors]
    return EvalReport(
        split=split,
        variant=model.variant.value,
        n_images=len(coverages),
        mse_overall=total[0] / max(total[1], 1),
        mse_by_group=by_group,
        per_expression=frame_errors,
        quartiles=[float(q) for q in np.percentile(mses, [25, 50, 75])],
        coverage=CoverageStats(mean=float(np.mean(coverages)), min=min(coverages), max=max(coverages)),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

class OrderingCheck(BaseModel):
    better: str
    worse: str
    # mean(worse) - mean(better)
    margin: float
    # larger of the two per-seed standard deviations
    threshold: float
    passed: bool
    # only gated checks decide the ablation verdict
    gated: bool = True


def ordering_checks(mse: Dict[str, List[float]]) -> List[OrderingCheck]:
    """
    Variant comparisons over per-seed MSE.

    A check passes only when the worse variant's mean exceeds the better
    one's by more than the larger per-seed spread; equal means never pass.
    Standard deviations are population (ddof=0), so a single seed needs a
    strictly positive margin.
    """
    checks: List[OrderingCheck] = []
    for pairs, gated in ((ABLATION_ORDER, True), (REPORTED_ORDER, False)):
        for a, b in pairs:
            if a.value not in mse or b.value not in mse:
                continue
            better, worse = np.asarray(mse[a.value]), np.asarray(mse[b.value])
            margin = float(worse.mean() - better.mean())
            threshold = float(max(better.std(), worse.std()))
            checks.append(OrderingCheck(
                better=a.value, worse=b.value, margin=margin, threshold=threshold,
                gated=gated, passed=margin > threshold,
            ))
    return checks


class AblationReport(BaseModel):
    seeds: List[int]
    mse: Dict[str, List[float]]
    mean_mse: Dict[str, float]
    std_mse: Dict[str, float] = Field(default_factory=dict)
    # held-out error per expression, from the first seed of each variant
    per_expression: Dict[str, List[ExpressionError]] = Field(default_factory=dict)
    errors: Dict[str, str] = Field(default_factory=dict)
    checks: List[OrderingCheck] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors and all(c.passed for c in self.checks if c.gated)

    def expression_table(self) -> str:
        variants = list(self.per_expression)
        by_frame: Dict[int, Dict[str, float]] = {}
        for v in variants:
            for e in self.per_expression[v]:
                by_frame.setdefault(e.frame, {})[v] = e.mse
        rows = [[f] + [by_frame[f].get(v, "-") for v in variants] for f in sorted(by_frame)]
        return format_table(["frame"] + variants, rows)

    def table(self) -> str:
        rows = [
            [v, self.mean_mse[v], self.std_mse.get(v, 0.0), " ".join(f"{m:.2f}" for m in self.mse[v])]
            for v in self.mean_mse
        ]
        rows += [[v, "failed", "-", e] for v, e in self.errors.items()]
        text = format_table(["variant", "mean MSE", "std", "per seed"], rows)
        for c in self.checks:
            verdict = ("PASS" if c.passed else "FAIL") if c.gated else ("info" if c.passed else "info, not separated")
            text += f"\n{verdict}: {c.better} < {c.worse} by {c.margin:.3f} (spread {c.threshold:.3f})"
        if self.per_expression:
            text += "\n\nper-expression MSE (first seed)\n" + self.expression_table()
        return text


def run_ablation(run: RunConfig, dataset: Dataset, variants: Sequence[Variant], seeds: int,
                 out_dir: Path, iterations: Optional[int] = None) -> AblationReport:
    """train each variant under identical seeds and budget, then compare held-out MSE"""
    seed_list = [run.train.seed + s for s in range(seeds)]
    mse: Dict[str, List[float]] = {}
    per_expression: Dict[str, List[ExpressionError]] = {}
    errors: Dict[str, str] = {}
    for variant in variants:
        for seed in seed_list:
            seeded = run.model_copy(update={"train": run.train.model_copy(update={"seed": seed})})
            try:
                trainer = Trainer(seeded, dataset, out_dir / variant.value / f"seed{seed}", variant)
                trainer.train(iterations, progress=False)
                report = evaluate(trainer.model, dataset, "test")
                mse.setdefault(variant.value, []).append(report.mse_overall)
                per_expression.setdefault(variant.value, report.per_expression)
            except Exception as e:
                logger.error(f"Ablation variant {variant.value} (seed {seed}) failed: {e}")
                errors[variant.value] = str(e)
                mse.pop(variant.value, None)
                per_expression.pop(variant.value, None)
                break
    mean = {v: float(np.mean(m)) for v, m in mse.items()}
    std = {v: float(np.std(m)) for v, m in mse.items()}
    checks = ordering_checks(mse)
    for c in checks:
        if c.gated and not c.passed:
            logger.warning(f"Ablation ordering not separated: {c.better} vs {c.worse}, "
                           f"margin {c.margin:.3f} <= spread {c.threshold:.3f}")
    return AblationReport(seeds=seed_list, mse=mse, mean_mse=mean, std_mse=std,
                          per_expression=per_expression, errors=errors, checks=checks)


# ---------------------------------------------------------------------------
# Cost benchmark
# ---------------------------------------------------------------------------

class BenchRow(BaseModel):
    distance_mm: float
    coverage: int
    per_object_flops: int
    per_pixel_flops: int
    decoder_invocations: int
    baseline_flops: int
    ratio_to_baseline: float
    per_object_ms: float
    per_pixel_ms: float
    scene_coverage: Optional[int] = None
    scene_per_pixel_flops: Optional[int] = None


class BenchReport(BaseModel):
    variant: str
    avatars: int
    texture_resolution: int
    rows: List[BenchRow]
    checks: Dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def table(self) -> str:
        headers = ["distance", "pixels", "obj FLOPs", "pix FLOPs", "texture FLOPs", "ratio", "obj ms", "pix ms"]
        rows = [[r.distance_mm, r.coverage, r.per_object_flops, r.per_pixel_flops, r.baseline_flops,
                 r.ratio_to_baseline, r.per_object_ms, r.per_pixel_ms] for r in self.rows]
        if self.avatars > 1:
            headers += ["scene pixels", "scene pix FLOPs"]
            for row, r in zip(rows, self.rows):
                row += [r.scene_coverage, r.scene_per_pixel_flops]
        text = format_table(headers, rows)
        for name, ok in self.checks.items():
            text += f"\n{'PASS' if ok else 'FAIL'}: {name}"
        return text


def avatar_row(vertices: np.ndarray, topo: MeshTopology, count: int) -> Tuple[np.ndarray, MeshTopology]:
    """count copies of a mesh spaced along x, merged into one mesh"""
    offsets = (np.arange(count) - (count - 1) / 2.0) * AVATAR_SPACING_MM
    positions = np.concatenate([vertices + np.array([dx, 0.0, 0.0]) for dx in offsets])
    triangles = np.concatenate([topo.triangles + i * topo.vertex_count for i in range(count)])
    return positions, MeshTopology(np.tile(topo.vertex_uvs, (count, 1)), triangles)


def run_bench(model: PixelCodecAvatar, dataset: Dataset, distances: Sequence[float], avatars: int = 1) -> BenchReport:
    """
    Render one expression at several distances and account analytic cost.

    The per-object stage is fixed work; per-pixel work scales with the
    covered pixel count, unlike a texture-space decoder that shades every texel.
    """
    if any(d <= 0 for d in distances) or avatars < 1:
        raise ValueError("distances must be positive and avatars >= 1")
    scene = dataset.config
    frames = dataset.frames("test") or dataset.frames()
    sample = dataset.load_frame(frames[0])
    mu, _ = encode_sample(model, sample)
    config = model.config
    obj_flops = per_object_flops(config)
    pix_flops = per_pixel_flops(config)
    texels = config.texture_resolution ** 2

    rows: List[BenchRow] = []
    for distance in distances:
        camera = orbit_camera(0.0, 0.0, distance, scene.image_size, scene.focal_factor)
        started = time.perf_counter()
        model.decode_geometry(mu)
        model.decode_appearance(mu, view_tile(camera))
        object_ms = (time.perf_counter() - started) * 1000.0
        before = model.pixel_decoder_invocations
        started = time.perf_counter()
        result = model.render_frame(mu, camera)
        pixel_ms = max((time.perf_counter() - started) * 1000.0 - object_ms, 0.0)
        # per-pixel work is what the renderer actually ran, not what the raster predicts
        invocations = model.pixel_decoder_invocations - before
        coverage = result.gbuffer.n_covered
        row = BenchRow(
            distance_mm=float(distance),
            coverage=coverage,
            per_object_flops=obj_flops,
            per_pixel_flops=pix_flops * invocations,
            decoder_invocations=invocations,
            baseline_flops=pix_flops * texels,
            ratio_to_baseline=coverage / texels,
            per_object_ms=round(object_ms, 3),
            per_pixel_ms=round(pixel_ms, 3),
        )
        if avatars > 1:
            positions, topo = avatar_row(result.vertices.data.astype(np.float64), model.topology(), avatars)
            scene_cov = rasterize(positions, topo, camera).n_covered
            row.scene_coverage = scene_cov
            row.scene_per_pixel_flops = pix_flops * scene_cov
        rows.append(row)
        if coverage == 0:
            logger.warning(f"Avatar covers no pixels at {distance} mm")

    ordered = sorted(rows, key=lambda r: r.distance_mm)
    covered = [r for r in rows if r.coverage > 0]
    per_pixel_rates = [r.per_pixel_flops / r.coverage for r in covered]
    object_costs = [r.per_object_flops for r in rows]
    checks = {
        "per-object cost constant across distances": max(object_costs) <= 1.05 * min(object_costs),
        "per-pixel FLOPs proportional to coverage": (
            not per_pixel_rates or max(per_pixel_rates) <= 1.10 * min(per_pixel_rates)
        ),
        "coverage non-increasing with distance": all(
            a.coverage >= b.coverage for a, b in zip(ordered, ordered[1:])
        ),
        "decoder invocations equal covered pixels": all(r.decoder_invocations == r.coverage for r in rows),
    }
    if avatars > 1:
        checks["scene coverage at most avatars × single coverage"] = all(
            r.scene_coverage <= avatars * r.coverage for r in rows
        )
    return BenchReport(variant=model.variant.value, avatars=avatars,
                       texture_resolution=config.texture_resolution, rows=rows, checks=checks)


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

@dataclass
class GradcheckResult:
    name: str
    error: float
    passed: bool


def _weighted(rng: np.random.Generator, fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
    """scalarize an op with fixed random weights so every output entry matters"""
    cache: Dict[Tuple[int, ...], np.ndarray] = {}

    def closure(*inputs: Tensor) -> Tensor:
        out = fn(*inputs)
        if out.shape not in cache:
            cache[out.shape] = rng.standard_normal(out.shape)
        return dc.sum(out * cache[out.shape])

    return closure


def _tiny_model(posmap: int, seed: int = 0) -> PixelCodecAvatar:
    n = int(round(math.log2(posmap // 8)))
    cfg = ModelConfig(
        posmap_resolution=posmap,
        tex_head_channels=(4, 4),
        geom_head_channels=4,
        encoder_channels=[8] * n,
        geometry_channels=[4] * (n - 1) + [3],
        expression_channels=[4] * n,
        dense_grid=9,
        coarse_grid=5,
        uv_map_resolution=16,
        uv_1d_resolution=32,
    )
    return PixelCodecAvatar(cfg, seed=seed)


def _with_params(model: PixelCodecAvatar, names: Sequence[str], fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
    """run fn with the named model parameters replaced by the leading inputs"""
    def closure(*inputs: Tensor) -> Tensor:
        saved = {n: model.params[n] for n in names}
        model.params.update(dict(zip(names, inputs[:len(names)])))
        try:
            return fn(*inputs[len(names):])
        finally:
            model.params.update(saved)
    return closure


def gradcheck_suite() -> List[Tuple[str, Callable[[np.random.Generator], Tuple[Callable, List[Tensor]]]]]:
    """(name, builder) pairs; a builder returns a scalar closure and its inputs"""

    def t(rng, *shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape))

    def away_from_zero(rng, *shape):
        return Tensor(rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape))

    def conv(rng):
        return _weighted(rng, lambda x, w, b: dc.conv2d(x, w, b, 2, 1)), [t(rng, 2, 5, 5), t(rng, 3, 2, 3, 3), t(rng, 3)]

    def conv_untied(rng):
        return _weighted(rng, lambda x, w, b: dc.conv2d_untied_bias(x, w, b, 1, 1)), [t(rng, 2, 4, 4), t(rng, 3, 2, 3, 3), t(rng, 3, 4, 4)]

    def conv_t(rng):
        return _weighted(rng, lambda x, w, b: dc.conv_transpose2d(x, w, b, 2, 1)), [t(rng, 2, 3, 3), t(rng, 2, 3, 4, 4), t(rng, 3)]

    def conv_t_untied(rng):
        return _weighted(rng, lambda x, w, b: dc.conv_transpose2d(x, w, b, 2, 1)), [t(rng, 2, 3, 3), t(rng, 2, 3, 4, 4), t(rng, 3, 6, 6)]

    def lrelu(rng):
        return _weighted(rng, lambda x: dc.leaky_relu(x, 0.2)), [away_from_zero(rng, 4, 5)]

    def sine(rng):
        return _weighted(rng, lambda x, w, b: dc.sine_linear(x, w, b, 30.0)), [t(rng, 5, 3), t(rng, 4, 3, lo=-0.05, hi=0.05), t(rng, 4)]

    def linear(rng):
        return _weighted(rng, dc.linear_final), [t(rng, 5, 3), t(rng, 4, 3), t(rng, 4)]

    def bilinear(rng):
        return _weighted(rng, dc.bilinear_sample), [t(rng, 4, 5, 2), t(rng, 6, 2, lo=0.2, hi=0.8)]

    def bilinear_1d(rng):
        return _weighted(rng, dc.bilinear_sample), [t(rng, 8, 1, 2), Tensor(np.stack([np.full(6, 0.5), rng.uniform(0.1, 0.9, 6)], axis=1))]

    def glue(rng):
        def fn(x, y):
            a = dc.sqrt(dc.exp(x) * y + 1.0) / (y + 2.0)
            b = dc.square(x) * 0.5 - y
            out = dc.concat([a - b, dc.absolute(x)[:, 1:3]], axis=1)
            return dc.mean(dc.transpose(dc.reshape(out, (6, 3)), (1, 0)), axis=0)
        return _weighted(rng, fn), [away_from_zero(rng, 3, 4), t(rng, 3, 4, lo=0.5, hi=2.0)]

    def sparse_op(rng):
        m = sparse.random(5, 4, density=0.5, random_state=np.random.RandomState(1), format="csr")
        return _weighted(rng, lambda x: dc.sparse_matmul(m, x[np.array([0, 2, 2, 1])])), [t(rng, 3, 3)]

    def pixel_decoder(rng):
        model = _tiny_model(16)
        names = [f"pixel.{i}.{k}" for i in range(4) for k in ("weight", "bias")]
        params = [Tensor(model.params[n].data) for n in names]
        return _weighted(rng, _with_params(model, names, model.pixel_color)), params + [t(rng, 5, 16)]

    def geometry_decoder(rng):
        model = _tiny_model(32)
        names = ["geometry.block0.weight", "geometry.block1.weight", "geometry.scale", "geometry.offset"]
        params = [Tensor(model.params[n].data) for n in names]
        params[1] = Tensor(params[1].data * 100.0)
        return _weighted(rng, _with_params(model, names, model.decode_geometry)), params + [t(rng, 4, 8, 8)]

    def loss_assembly(rng):
        topo_d = make_grid_topology(5, 5, 0.05)
        topo_c = make_grid_topology(3, 3, 0.05)
        uv = topo_d.vertex_uvs
        neutral = np.stack([uv[:, 0] * 100, uv[:, 1] * 100, 10 * np.sin(3 * uv[:, 0])], axis=1)
        L = cotangent_laplacian(topo_d, neutral)
        W_L = laplacian_weights(topo_d, (0.5, 0.5), 0.2)
        W_M = mesh_mask(topo_c, (0.5, 0.5), 0.2)
        M_t = rng.uniform(-1, 1, (8, 8, 3))
        V_mu = neutral * 0.01
        target = rng.uniform(0, 1, (3, 4, 4))
        coverage = rng.uniform(size=(4, 4)) > 0.3
        D_hat0 = rng.uniform(400, 500, (4, 4))
        D = D_hat0 + rng.uniform(1, 5, (4, 4)) * rng.choice([-1.0, 1.0], (4, 4))
        weights = LossWeights()

        def fn(G, image, D_hat, mu, logvar):
            return total_loss({
                "image": image_loss(image, target, coverage)[0],
                "depth": depth_loss(D, D_hat, coverage)[0],
                "mesh": mesh_loss(G, M_t, topo_c, W_M),
                "smooth": smoothness_loss(G, topo_d, L, W_L, V_mu),
                "kl": kl_loss(mu, logvar),
            }, weights)

        return fn, [t(rng, 8, 8, 3), t(rng, 3, 4, 4), Tensor(D_hat0), t(rng, 4, 2, 2), t(rng, 4, 2, 2)]

    return [
        ("conv2d", conv),
        ("conv2d_untied_bias", conv_untied),
        ("conv_transpose2d", conv_t),
        ("conv_transpose2d_untied", conv_t_untied),
        ("leaky_relu", lrelu),
        ("sine_linear", sine),
        ("linear_final", linear),
        ("bilinear_sample", bilinear),
        ("bilinear_sample_1d", bilinear_1d),
        ("glue_arithmetic", glue),
        ("sparse_matmul", sparse_op),
        ("pixel_decoder", pixel_decoder),
        ("geometry_decoder", geometry_decoder),
        ("loss_assembly", loss_assembly),
    ]


def run_gradcheck(double: bool = False, only: Optional[Sequence[str]] = None, seeds: int = 10,
                  epsilon: Optional[float] = None) -> List[GradcheckResult]:
    """worst relative error per case over `seeds` random draws, against 1e-3 (1e-5 in float64)"""
    tolerance = 1e-5 if double else 1e-3
    if epsilon is None:
        epsilon = 1e-6 if double else 1e-5
    names = [name for name, _ in gradcheck_suite()]
    unknown = set(only or ()) - set(names)
    if unknown:
        raise ValueError(f"unknown gradcheck cases: {sorted(unknown)}")
    results = []
    for name, build in gradcheck_suite():
        if only and name not in only:
            continue
        error = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            with dc.precision(np.float64 if double else np.float32):
                closure, inputs = build(rng)
                error = max(error, gradcheck(closure, inputs, epsilon))
        logger.debug(f"gradcheck {name}: {error:.3e}")
        results.append(GradcheckResult(name, error, error < tolerance))
    return results


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    run = load_run_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
        run = run.model_copy(update={"scene": run.scene.model_copy(update={"seed": args.seed})})
    if getattr(args, "deterministic", False):
        updates["deterministic"] = True
    if getattr(args, "data", None):
        updates["data"] = args.data
    if updates:
        run = run.model_copy(update={"train": run.train.model_copy(update=updates)})
    return run


def _dataset(args, run: Optional[RunConfig] = None) -> Dataset:
    path = getattr(args, "data", None) or (run.train.data if run else None)
    if not path:
        raise DatasetError("no dataset given (use --data)")
    return Dataset(path)


def _write_report(out: Optional[str], name: str, report: BaseModel) -> None:
    if not out:
        return
    directory = Path(out)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Report written: {directory / name}")


def cmd_gen_data(args) -> int:
    run = load_run_config(args.config)
    scene = run.scene
    if args.seed is not None:
        scene = scene.model_copy(update={"seed": args.seed})
    write_dataset(scene, args.out or "data")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    dataset = _dataset(args, run)
    variant = parse_variant(args.variant) if args.variant else None
    trainer = Trainer(run, dataset, Path(args.out or "runs/train"), variant)
    final = trainer.train(args.iterations)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.ckpt)
    report = evaluate(model, _dataset(args), args.split)
    print(report.table())
    for note in report.notes:
        print(f"note: {note}")
    _write_report(args.out, "eval_report.json", report)
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    dataset = _dataset(args, run)
    variants = [parse_variant(v) for v in args.variants.split(",")]
    report = run_ablation(run, dataset, variants, args.seeds, Path(args.out or "runs/ablate"), args.iterations)
    print(report.table())
    _write_report(args.out or "runs/ablate", "ablation_report.json", report)
    return 0 if report.passed else 1


def cmd_bench(args) -> int:
    model, _ = load_model(args.ckpt)
    distances = [float(d) for d in args.distances.split(",")]
    report = run_bench(model, _dataset(args), distances, args.avatars)
    print(report.table())
    _write_report(args.out, "bench_report.json", report)
    return 0 if report.passed else 1


def render_camera(dataset: Dataset, camera: int, yaw: Optional[float], pitch: Optional[float],
                  distance: Optional[float]) -> Camera:
    """a dataset camera, or a novel pose looking at the face when any of yaw/pitch/distance is set"""
    scene = dataset.config
    if yaw is None and pitch is None and distance is None:
        if not 0 <= camera < len(dataset.cameras):
            raise ValueError(f"camera {camera} out of range (0..{len(dataset.cameras) - 1})")
        return dataset.cameras[camera]
    distance = scene.camera_distance if distance is None else distance
    if distance <= 0:
        raise ValueError("distance must be positive")
    return orbit_camera(yaw or 0.0, pitch or 0.0, distance, scene.image_size, scene.focal_factor)


def cmd_render(args) -> int:
    model, _ = load_model(args.ckpt)
    dataset = _dataset(args)
    frame = args.frame if args.frame is not None else (dataset.frames("test") or dataset.frames())[0]
    camera = render_camera(dataset, args.camera, args.yaw, args.pitch, args.distance)
    sample = dataset.load_frame(frame)
    result = render_sample(model, sample, camera)
    out = Path(args.out or "renders")
    out.mkdir(parents=True, exist_ok=True)

    gb = result.gbuffer
    if gb.n_covered == 0:
        logger.warning("Render covers no pixels; writing the background image")
    write_png(out / "render.png", result.image_array())
    depth = result.depth.data.astype(np.float64)
    depth_image = np.zeros(depth.shape)
    d_min = d_max = None
    if gb.n_covered:
        d = depth[gb.coverage]
        d_min, d_max = float(d.min()), float(d.max())
        depth_image[gb.coverage] = 1.0 - (d - d_min) / max(d_max - d_min, 1e-9)
    write_png(out / "depth.png", np.repeat(depth_image[..., None], 3, axis=2))
    sidecar = {
        "frame": frame,
        "camera": camera.to_dict(),
        "coverage": gb.n_covered,
        "pixel_decoder_invocations": result.decoder_invocations,
        "depth_min_mm": d_min,
        "depth_max_mm": d_max,
        "checkpoint": str(args.ckpt),
    }
    (out / "render.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    if args.obj:
        dense = model.dense_topology
        write_obj(out / "mesh.obj", sample_position_map(result.position_map, dense).data, dense)
    if args.gbuffer:
        save_gbuffer_images(gb, out)
    print(f"rendered frame {frame}: {gb.n_covered} covered pixels -> {out / 'render.png'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(double=args.double, only=args.only, seeds=args.seeds)
    rows = [[r.name, r.error, "ok" if r.passed else "FAIL"] for r in results]
    print(format_table(["op", "max rel err", "status"], rows))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return 1
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from pica.server import create_app

    uvicorn.run(create_app(args.ckpt, args.data), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pica", description="Pixel codec avatar toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, ckpt=False):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint file")

    p = sub.add_parser("gen-data", help="generate a synthetic multiview dataset")
    common(p, data=False)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--iterations", type=int)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out MSE per view group")
    common(p, ckpt=True)
    p.add_argument("--split", default="test", choices=["test", "train", "all"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare pixel-feature variants and the texture baseline")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--variants", default=",".join(v.value for v in Variant))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="decode cost against avatar distance")
    common(p, ckpt=True)
    p.add_argument("--distances", default=",".join(str(d) for d in BENCH_DISTANCES))
    p.add_argument("--avatars", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="render one frame")
    common(p, ckpt=True)
    p.add_argument("--frame", type=int)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--yaw", type=float)
    p.add_argument("--pitch", type=float)
    p.add_argument("--distance", type=float)
    p.add_argument("--obj", action="store_true", help="also export the decoded mesh")
    p.add_argument("--gbuffer", action="store_true", help="also dump G-buffer images")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--double", action="store_true", help="float64 analytic gradients")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--only", nargs="*", help="case names to run")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="HTTP decode service")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
