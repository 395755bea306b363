"""Central finite-difference verification of autograd gradients.

Each suite builds a small float64 instance of one component, forms the
scalar loss ``sum(out * R)`` with a fixed random ``R``, and compares the
autograd gradient of every parameter group (and the input) against
``(L(p + h) - L(p - h)) / 2h``. The error of a group is
``max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, 1e-12)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .injection import GFL, MHTA, PromptInjection
from .model import MODES, FiLM, ModelConfig, PromptConfig, PromptUNet, parameter_group
from .prompts import CLPPrompt, GPDPrompt, PromptFusion

DEFAULT_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
FD_STEP = 1e-5


@dataclass
class GroupResult:
    suite: str
    group: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


@dataclass
class GradcheckReport:
    groups: list[GroupResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def failures(self) -> list[GroupResult]:
        return [g for g in self.groups if not g.passed]

    def worst(self, suite: str | None = None) -> float:
        errs = [g.max_rel_error for g in self.groups if suite is None or g.suite == suite]
        return max(errs, default=0.0)

    def table(self) -> str:
        lines = [f"{'suite':<10} {'group':<30} {'max rel err':>12} {'tol':>8} {'n':>5}  status"]
        for g in self.groups:
            status = "ok" if g.passed else "FAIL"
            lines.append(
                f"{g.suite:<10} {g.group:<30} {g.max_rel_error:12.3e} {g.tolerance:8.0e} {g.checked:5d}  {status}"
            )
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    suite: str,
    forward: Callable[[], torch.Tensor],
    tensors: dict[str, list[torch.Tensor]],
    tolerance: float,
    seed: int = 0,
    max_per_group: int = 40,
    step: float = FD_STEP,
    corrupt: str | None = None,
) -> list[GroupResult]:
    """Compare autograd against central differences for each named tensor group.

    ``forward`` must be a closure over the tensors in ``tensors`` (all float64,
    ``requires_grad=True``). At most ``max_per_group`` randomly chosen entries
    are perturbed per group. ``corrupt`` names a group whose analytic gradient
    is deliberately scaled, for exercising the failure path.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        out = forward()
    weight = torch.from_numpy(rng.standard_normal(tuple(out.shape))).to(out.dtype)

    def loss() -> torch.Tensor:
        return (forward() * weight).sum()

    flat = [t for ts in tensors.values() for t in ts]
    for t in flat:
        t.grad = None
    grads = torch.autograd.grad(loss(), flat, allow_unused=True)
    analytic = {id(t): (torch.zeros_like(t) if g is None else g) for t, g in zip(flat, grads)}

    results = []
    for name, ts in tensors.items():
        # (tensor, flat index) candidates across the group
        cands = [(ti, i) for ti, t in enumerate(ts) for i in range(t.numel())]
        if len(cands) > max_per_group:
            pick = rng.choice(len(cands), size=max_per_group, replace=False)
            cands = [cands[j] for j in sorted(pick)]
        a_vals, n_vals = [], []
        for ti, i in cands:
            t = ts[ti]
            view = t.data.view(-1)
            orig = view[i].item()
            with torch.no_grad():
                view[i] = orig + step
                up = loss().item()
                view[i] = orig - step
                down = loss().item()
                view[i] = orig
            n_vals.append((up - down) / (2 * step))
            a_vals.append(analytic[id(t)].reshape(-1)[i].item())
        a = np.asarray(a_vals)
        if name == corrupt:
            a = a * 1.5 + 1e-3
        results.append(GroupResult(suite, name, relative_error(a, np.asarray(n_vals)), len(cands), tolerance))
    return results


def _groups(module: nn.Module, prefix: str = "") -> dict[str, list[torch.Tensor]]:
    out: dict[str, list[torch.Tensor]] = {}
    for name, p in module.named_parameters():
        key = prefix + ".".join(name.split(".")[:-1]) if "." in name else prefix + name
        out.setdefault(key or name, []).append(p)
    return out


def _leaf(rng, *shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape)).requires_grad_()


def suite_clp(seed: int, tolerance: float, linear: bool = False, corrupt=None) -> list[GroupResult]:
    torch.manual_seed(seed)
    clp = CLPPrompt(dim=8, hidden=16, activation="identity" if linear else "relu").double()
    delta = torch.tensor([0.13, 0.17, 0.22], dtype=torch.float64)
    return check_gradients("clp", lambda: clp(delta), _groups(clp, "clp."), tolerance, seed, corrupt=corrupt)


def suite_gpd(seed: int, tolerance: float, corrupt=None) -> list[GroupResult]:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gpd = GPDPrompt(4, n_components=3, base_size=(3, 3, 3)).double()
    with torch.no_grad():
        gpd.components.normal_(0, 1.0)
    feat = _leaf(rng, 2, 4, 2, 2, 2)
    groups = _groups(gpd, "gpd.")
    groups["gpd.input"] = [feat]
    return check_gradients("gpd", lambda: gpd(feat)[0], groups, tolerance, seed, corrupt=corrupt)


def suite_fusion(seed: int, tolerance: float, corrupt=None) -> list[GroupResult]:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    fusion = PromptFusion(4, clp_dim=8).double()
    p_g = _leaf(rng, 2, 4, 2, 2, 2)
    p_c = _leaf(rng, 2, 8)
    groups = _groups(fusion, "fusion.")
    groups["fusion.input_g"] = [p_g]
    groups["fusion.input_c"] = [p_c]
    return check_gradients("fusion", lambda: fusion(p_g, p_c), groups, tolerance, seed, corrupt=corrupt)


def suite_prompts(seed: int, tolerance: float, corrupt=None) -> list[GroupResult]:
    """CLP -> GPD -> fusion chained end to end, the composed prompt path."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    clp = CLPPrompt(dim=8, hidden=16).double()
    gpd = GPDPrompt(4, n_components=3, base_size=(2, 2, 2)).double()
    fusion = PromptFusion(4, clp_dim=8).double()
    with torch.no_grad():
        gpd.components.normal_(0, 1.0)
    feat = _leaf(rng, 2, 4, 2, 2, 2)
    delta = torch.tensor([0.15, 0.2], dtype=torch.float64)
    groups = {**_groups(clp, "chain.clp."), **_groups(gpd, "chain.gpd."), **_groups(fusion, "chain.fusion.")}
    return check_gradients(
        "prompts", lambda: fusion(gpd(feat)[0], clp(delta)), groups, tolerance, seed, corrupt=corrupt
    )


def suite_injection(seed: int, tolerance: float, corrupt=None) -> list[GroupResult]:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    inj = PromptInjection(4, heads=2, expansion=2.0).double()
    with torch.no_grad():
        for blk in inj.blocks:
            blk.attn.temperature.uniform_(0.5, 2.0)
    feat = _leaf(rng, 1, 4, 2, 2, 2)
    prompt = _leaf(rng, 1, 4, 2, 2, 2)
    groups = _groups(inj, "inject.")
    groups["inject.input_f"] = [feat]
    groups["inject.input_p"] = [prompt]
    res = check_gradients("injection", lambda: inj(feat, prompt), groups, tolerance, seed, corrupt=corrupt)

    mhta = MHTA(4, heads=2).double()
    gfl = GFL(4, expansion=2.0).double()
    x = _leaf(rng, 1, 4, 2, 2, 2)
    res += check_gradients("mhta", lambda: mhta(x), {**_groups(mhta, "mhta."), "mhta.input": [x]}, tolerance, seed, corrupt=corrupt)
    res += check_gradients("gfl", lambda: gfl(x), {**_groups(gfl, "gfl."), "gfl.input": [x]}, tolerance, seed, corrupt=corrupt)
    return res


def suite_film(seed: int, tolerance: float, corrupt=None) -> list[GroupResult]:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    film = FiLM(4, hidden=8).double()
    with torch.no_grad():
        # the zero init would make the scale/shift path trivially flat
        film.fc2.weight.normal_(0, 0.5)
    feat = _leaf(rng, 2, 4, 2, 2, 2)
    delta = torch.tensor([0.13, 0.21], dtype=torch.float64)
    groups = {**_groups(film, "film."), "film.input": [feat]}
    return check_gradients("film", lambda: film(feat, delta), groups, tolerance, seed, corrupt=corrupt)


def tiny_model_config(mode: str = "dual") -> ModelConfig:
    return ModelConfig(
        levels=1,
        base_channels=2,
        mode=mode,
        prompt=PromptConfig(n_components=3, clp_dim=4, clp_hidden=4, heads=1, base_size=(2, 2, 2), film_hidden=4),
    )


def suite_model(seed: int, tolerance: float, modes=("dual",), corrupt=None) -> list[GroupResult]:
    """Whole network, tiny config (1 level, 2 base channels) on an 8x8x4 volume."""
    rng = np.random.default_rng(seed)
    res = []
    for mode in modes:
        torch.manual_seed(seed)
        model = PromptUNet(tiny_model_config(mode)).double()
        with torch.no_grad():
            for name, p in model.named_parameters():
                # zero-initialized layers would hide every upstream gradient
                if name.endswith("film.fc2.weight") or name == "head.weight":
                    p.normal_(0, 0.5)
        x = torch.from_numpy(rng.uniform(0, 2, size=(2, 1, 8, 8, 4)))
        delta = torch.tensor([0.14, 0.2], dtype=torch.float64)
        groups: dict[str, list[torch.Tensor]] = {}
        for name, p in model.named_parameters():
            groups.setdefault(f"{mode}:{parameter_group(name)}", []).append(p)
        res += check_gradients("model", lambda: model(x, delta), groups, tolerance, seed, max_per_group=12, corrupt=corrupt)
    return res


def run_all(seed: int = 0, tolerance: float | None = None, corrupt: str | None = None) -> GradcheckReport:
    """Every suite; ``tolerance`` overrides the per-suite defaults when given."""
    tol = tolerance if tolerance is not None else DEFAULT_TOLERANCE
    mtol = tolerance if tolerance is not None else MODEL_TOLERANCE
    start = time.perf_counter()
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        groups = []
        groups += suite_clp(seed, tol, corrupt=corrupt)
        groups += suite_gpd(seed, tol, corrupt=corrupt)
        groups += suite_fusion(seed, tol, corrupt=corrupt)
        groups += suite_prompts(seed, tol, corrupt=corrupt)
        groups += suite_injection(seed, tol, corrupt=corrupt)
        groups += suite_film(seed, tol, corrupt=corrupt)
        groups += suite_model(seed, mtol, modes=MODES, corrupt=corrupt)
    finally:
        torch.set_default_dtype(prev)
    return GradcheckReport(groups, time.perf_counter() - start)


def gradcheck_prompts(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, corrupt: str | None = None) -> GradcheckReport:
    """CLP, GPD and fusion suites only."""
    start = time.perf_counter()
    groups = suite_clp(seed, tolerance, corrupt=corrupt) + suite_gpd(seed, tolerance, corrupt=corrupt)
    groups += suite_fusion(seed, tolerance, corrupt=corrupt) + suite_prompts(seed, tolerance, corrupt=corrupt)
    return GradcheckReport(groups, time.perf_counter() - start)
