#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Self-Test Service - Сервис самопроверки

Runs the invariant suites of every module and reports one line per check.
``quick`` covers the cheap properties; ``full`` adds 64-bit gradient checks
on every differentiable op, the end-to-end gradient check, more oracle
instances, checkpoint round trips and the single-batch overfit.
"""

import logging
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from app.core import ops
from app.core.errors import ConfigError, DavitError
from app.core.gradcheck import grad_check
from app.core.rng import Rng
from app.core.tensor import Tensor
from app.models.attention import (
    AttentionParams, WindowGrid, channel_group_attention, global_mhsa, window_attention,
    window_partition, window_reverse,
)
from app.models.checkpoint import load_checkpoint, save_checkpoint
from app.models.config import REFERENCE_SIZES, get_preset
from app.models.davit import build_model
from app.services.analysis import count_flops, count_params, scaling_probe
from app.services.oracles import nearest_centroid_accuracy, reference_channel_attention
from app.services.toy_data import ToySpec, generate_toy_dataset
from app.services.training import (
    AdamWState, TriangularSchedule, adamw_step, clip_grad_global_norm, overfit_batch,
    triangular_lr,
)

LEVELS = ("quick", "full")

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.suite}.{self.name}: {self.detail}"


@dataclass
class SelfTestReport:
    """
    Outcome of one self-test run
    Результат самопроверки
    """
    level: str
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [result for result in self.results if not result.passed]

    def lines(self) -> List[str]:
        return [result.line() for result in self.results]

    def to_dict(self) -> Dict:
        return {"level": self.level, "passed": self.passed,
                "total": len(self.results), "failed": len(self.failures),
                "results": [asdict(result) for result in self.results]}


def _weighted_sum(y: Tensor, seed: int) -> Tensor:
    """Scalar probe with random weights so no gradient vanishes by symmetry"""
    weights = Rng(seed).normal(y.shape, dtype=np.float64)
    return ops.sum(ops.mul(y, Tensor(weights)))


def _random(rng: Rng, shape, std: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape, std=std, dtype=np.float64))


class SelfTestRunner:
    """
    Runs invariant suites
    Запуск наборов проверок инвариантов
    """

    def __init__(self, level: str = "quick", seed: int = 0):
        if level not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}, got '{level}'")
        self.logger = logging.getLogger(__name__)
        self.level = level
        self.full = level == "full"
        self.seed = seed
        self.report = SelfTestReport(level)

    def _check(self, suite: str, name: str, passed: bool, detail: str = ""):
        self.report.results.append(CheckResult(suite, name, bool(passed), detail))

    def run(self) -> SelfTestReport:
        suites: List[Callable[[], None]] = [
            self.tensor_suite, self.attention_suite, self.model_suite,
            self.analysis_suite, self.training_suite,
        ]
        for suite in suites:
            name = suite.__name__.replace("_suite", "")
            started = time.perf_counter()
            try:
                suite()
            except DavitError as exc:
                self._check(name, "suite", False, f"{type(exc).__name__}: {exc}")
            self.logger.debug(f"suite {name} took {time.perf_counter() - started:.2f}s")
        return self.report

    # --------------------------------------------------------------- tensor
    def tensor_suite(self):
        rng = Rng(self.seed)
        x = _random(rng, (3, 5))
        probs = ops.softmax_lastaxis(x).data
        self._check("tensor", "softmax_rows_sum_to_one",
                    np.abs(probs.sum(axis=-1) - 1).max() < 1e-6 and probs.min() >= 0 and probs.max() <= 1,
                    "rows sum to 1 within 1e-6")

        y = _random(rng, (2, 3, 4))
        restored = ops.permute(ops.permute(ops.reshape(ops.reshape(y, (6, 4)), (2, 3, 4)),
                                           (2, 0, 1)), (1, 2, 0))
        self._check("tensor", "reshape_permute_identity", np.array_equal(restored.data, y.data),
                    "bit-exact")

        m = _random(rng, (4, 3))
        gamma, beta = _random(rng, (4,)), _random(rng, (4,))
        cases: Dict[str, Callable[[Tensor], Tensor]] = {
            "matmul": lambda t: ops.sum(ops.matmul(t, m)),
            "softmax": lambda t: _weighted_sum(ops.softmax_lastaxis(t), 1),
            "layer_norm": lambda t: _weighted_sum(ops.layer_norm(t, gamma, beta), 2),
            "gelu": lambda t: _weighted_sum(ops.gelu(t), 3),
        }
        inputs = {"matmul": (2, 4), "softmax": (2, 5), "layer_norm": (3, 4), "gelu": (3, 4)}
        if self.full:
            w_dense = _random(rng, (3, 2, 3, 3), 0.5)
            w_depth = _random(rng, (2, 1, 3, 3), 0.5)
            bias = _random(rng, (3,))
            labels = np.array([0, 2])
            cases.update({
                "conv2d": lambda t: _weighted_sum(ops.conv2d(t, w_dense, bias, stride=2, pad=1), 4),
                "conv2d_depthwise": lambda t: _weighted_sum(ops.conv2d(t, w_depth, None, 1, 1, 2), 5),
                "cross_entropy": lambda t: ops.cross_entropy(t, labels),
                "mean": lambda t: _weighted_sum(ops.mean(t, axis=1), 6),
                "global_avg_pool": lambda t: _weighted_sum(ops.global_avg_pool(t), 7),
                "rearrange": lambda t: _weighted_sum(
                    ops.rearrange(t, "n (a b) c -> n b (a c)", a=2), 8),
                "scale_sub": lambda t: _weighted_sum(ops.sub(ops.scale(t, 0.5), t), 9),
            })
            inputs.update({"conv2d": (1, 2, 5, 5), "conv2d_depthwise": (1, 2, 4, 4),
                           "cross_entropy": (2, 3), "mean": (2, 3, 4),
                           "global_avg_pool": (2, 3, 3, 4), "rearrange": (1, 4, 3),
                           "scale_sub": (2, 3)})
        for op_name, fn in cases.items():
            error = grad_check(fn, _random(rng, inputs[op_name]))
            self._check("tensor", f"grad_check.{op_name}", error < OP_TOLERANCE,
                        f"max rel err {error:.2e}")

    # ------------------------------------------------------------ attention
    def attention_suite(self):
        rng = Rng(self.seed + 1)
        x = _random(rng, (2, 6, 4, 3))
        restored = window_reverse(window_partition(x, 2), WindowGrid(6, 4, 2))
        self._check("attention", "partition_reverse_round_trip",
                    np.array_equal(restored.data, x.data), "bit-exact")

        params = AttentionParams.initialize(8, 2, rng, std=0.3)
        grid_x = _random(rng, (1, 4, 4, 8))
        windowed = window_attention(grid_x, params, WindowGrid(4, 4, 4))
        direct = global_mhsa(ops.reshape(grid_x, (1, 16, 8)), params)
        diff = np.abs(windowed.data.reshape(1, 16, 8) - direct.data).max()
        self._check("attention", "full_grid_window_matches_global", diff < 1e-5,
                    f"max abs diff {diff:.1e}")

        grid = WindowGrid(4, 4, 2)
        base = window_attention(grid_x, params, grid).data
        poked = np.array(grid_x.data)
        poked[0, 0, 0] += 1.0
        moved = window_attention(Tensor(poked), params, grid).data
        others_equal = np.array_equal(base[0, :, 2:], moved[0, :, 2:]) and \
            np.array_equal(base[0, 2:, :2], moved[0, 2:, :2])
        self._check("attention", "window_locality", others_equal,
                    "other windows bit-exact after perturbing one patch")

        instances = 100 if self.full else 20
        worst = 0.0
        for i in range(instances):
            case = rng.spawn(i)
            groups, width = int(case.integers(1, 4)), int(case.integers(1, 5))
            tokens, batch = int(case.integers(1, 7)), int(case.integers(1, 3))
            p = AttentionParams.initialize(groups * width, groups, case, std=0.5)
            mode = "inv_sqrt_P" if i % 2 else "inv_sqrt_Cg"
            sample = _random(case, (batch, tokens, groups * width))
            got = channel_group_attention(sample, p, mode).data
            want = reference_channel_attention(sample.data, p, mode)
            worst = max(worst, float(np.abs(got - want).max()))
        self._check("attention", "channel_attention_oracle", worst < 1e-6,
                    f"{instances} instances, max abs diff {worst:.1e}")

        params = AttentionParams.initialize(6, 2, rng, std=0.3)
        tokens = _random(rng, (1, 9, 6))
        order = rng.permutation(9)
        permuted_first = channel_group_attention(Tensor(tokens.data[:, order]), params).data
        permuted_after = channel_group_attention(tokens, params).data[:, order]
        diff = np.abs(permuted_first - permuted_after).max()
        self._check("attention", "channel_permutation_equivariance", diff < 1e-5,
                    f"max abs diff {diff:.1e}")

        identity = AttentionParams.identity(6, 2)
        changed = np.array(tokens.data)
        changed[..., 3:] += rng.normal((1, 9, 3))
        before = channel_group_attention(tokens, identity).data[..., :3]
        after = channel_group_attention(Tensor(changed), identity).data[..., :3]
        diff = np.abs(before - after).max()
        self._check("attention", "group_locality", diff < 1e-6, f"max abs diff {diff:.1e}")

    # ---------------------------------------------------------------- model
    def model_suite(self):
        names = ["gradcheck_micro", "micro"] + (["tiny"] if self.full else [])
        for name in names:
            config = get_preset(name)
            built = build_model(config, seed=self.seed).num_parameters()
            counted = count_params(config).total_params
            self._check("model", f"param_count_matches_build.{name}", built == counted,
                        f"built {built:,}, counted {counted:,}")

        layouts = {order: count_params(get_preset("tiny").with_overrides(block_order=order))
                   .total_params for order in ("window_first", "channel_first", "parallel")}
        self._check("model", "ablation_layouts_equal_params", len(set(layouts.values())) == 1,
                    ", ".join(f"{k}={v:,}" for k, v in layouts.items()))

        config = get_preset("gradcheck_micro")
        image = Rng(self.seed + 2).normal((1, config.in_chans, 8, 8), dtype=np.float64)
        first = build_model(config, seed=self.seed, dtype=np.float64)(Tensor(image)).data
        second = build_model(config, seed=self.seed, dtype=np.float64)(Tensor(image)).data
        self._check("model", "seeded_forward_bit_exact", np.array_equal(first, second), "bit-exact")

        if not self.full:
            return
        model = build_model(config, seed=self.seed, dtype=np.float64)
        error = grad_check(lambda t: ops.cross_entropy(model(t), np.array([1])), Tensor(image),
                           max_coords=24, seed=self.seed)
        self._check("model", "end_to_end_grad_check", error < END_TO_END_TOLERANCE,
                    f"max rel err {error:.2e}")

        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(model, Path(tmp) / "micro.ckpt")
            restored = load_checkpoint(path)
            same = all(np.array_equal(a.data, b.data) for (_, a), (_, b) in
                       zip(model.named_parameters(), restored.named_parameters()))
            logits_same = np.array_equal(restored(Tensor(image)).data, first)
        self._check("model", "checkpoint_round_trip", same and logits_same,
                    "weights and logits bit-exact")

    # ------------------------------------------------------------- analysis
    def analysis_suite(self):
        for name, reference in REFERENCE_SIZES.items():
            config = get_preset(name)
            params_m = count_params(config).total_params / 1e6
            deviation = abs(params_m - reference["params_m"]) / reference["params_m"]
            self._check("analysis", f"params.{name}", deviation <= 0.02,
                        f"{params_m:.2f}M vs {reference['params_m']}M")
            for resolution, gflops in reference["gflops"].items():
                counted = count_flops(config, resolution).total_flops / 1e9
                deviation = abs(counted - gflops) / gflops
                self._check("analysis", f"flops.{name}@{resolution}", deviation <= 0.05,
                            f"{counted:.2f}G vs {gflops}G")

        rows = scaling_probe(get_preset("tiny"), [224, 448])
        drift = abs(rows[1].ratio - rows[0].ratio) / rows[0].ratio
        self._check("analysis", "attention_linear_in_tokens", drift < 0.01,
                    f"ratio drift {drift:.2e}")
        baseline = scaling_probe(get_preset("tiny").with_overrides(window_mode="global"),
                                 [224, 448])
        self._check("analysis", "global_baseline_superlinear", baseline[1].ratio > baseline[0].ratio,
                    f"ratio {baseline[0].ratio:.0f} -> {baseline[1].ratio:.0f}")

    # ------------------------------------------------------------- training
    def training_suite(self):
        schedule = TriangularSchedule(peak_lr=1.0, total_steps=100)
        points = [triangular_lr(schedule, s) for s in (0, 50, 75, 100)]
        self._check("training", "triangular_schedule", np.allclose(points, [0.0, 1.0, 0.5, 0.0]),
                    f"lr at 0/50/75/100 = {points}")

        clipped, norm = clip_grad_global_norm({"a": np.array([1.2, 0.0]), "b": np.array([1.6])})
        self._check("training", "clip_halves_norm_two",
                    abs(norm - 2.0) < 1e-12 and np.allclose(clipped["b"], [0.8]),
                    f"norm {norm:.3f}")

        w = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)
        initial = float(np.linalg.norm(w.data))
        state = AdamWState(lr=0.05, weight_decay=0.0)
        for _ in range(100):
            adamw_step({"w": w}, {"w": 2.0 * w.data}, state)
        final = float(np.linalg.norm(w.data))
        self._check("training", "adamw_quadratic_converges", final < 0.1 * initial,
                    f"|w| {initial:.3f} -> {final:.4f}")

        spec = ToySpec(noise=0.0, train_per_class=4, test_per_class=4)
        data = generate_toy_dataset(spec)
        again = generate_toy_dataset(spec)
        self._check("training", "toy_dataset_deterministic",
                    np.array_equal(data.train_images, again.train_images), "bit-exact")
        accuracy = nearest_centroid_accuracy(data.train_images, data.train_labels,
                                             data.test_images, data.test_labels)
        self._check("training", "toy_dataset_separable", accuracy == 1.0,
                    f"nearest-centroid accuracy {accuracy:.2f}")

        if not self.full:
            return
        model = build_model("micro", seed=self.seed)
        batch = generate_toy_dataset(ToySpec(train_per_class=2, test_per_class=0, seed=self.seed))
        losses = overfit_batch(model, batch.train_images, batch.train_labels, steps=200,
                               target_loss=0.01)
        self._check("training", "single_batch_overfit", losses[-1] < 0.01,
                    f"loss {losses[0]:.3f} -> {losses[-1]:.4f} in {len(losses)} steps")


def run_selftest(level: str = "quick", seed: int = 0) -> SelfTestReport:
    return SelfTestRunner(level, seed).run()
