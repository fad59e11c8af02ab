"""Direct scalar search over k, maximising BD-Rate improvement.

All three searches share the same budget and stopping contract: at most
``max_evaluations`` fresh objective calls, and a stop as soon as a new best
point improves on the previous best by less than ``tolerance`` percentage
points. Golden section and Brent start from ``initial_k`` as the interior
point of the full-domain bracket.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from ktune.model import Method, OptimizerTrace, TraceEntry

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0  # 0.618...
CGOLD = 1.0 - GOLDEN  # 0.381...
K_DECIMALS = 6


@dataclass(frozen=True)
class SearchConfig:
    k_min: float = 0.2
    k_max: float = 3.0
    max_evaluations: int = 15
    tolerance: float = 0.02  # percentage points of BD-Rate improvement
    initial_k: float = 1.0
    grid_step: float = 0.4
    spline_step: float = 0.01
    refine_deltas: tuple[float, ...] = (0.2, 0.1, 0.05)
    xtol: float = 1e-4  # relative k resolution for the bracketing searches

    def __post_init__(self):
        if not 0 < self.k_min < self.initial_k < self.k_max:
            raise ValueError(f"need 0 < k_min < initial_k < k_max, got {self.k_min}, {self.initial_k}, {self.k_max}")
        if self.max_evaluations < 3:
            raise ValueError("max_evaluations must be >= 3")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")

    @property
    def domain(self) -> tuple[float, float]:
        return (self.k_min, self.k_max)

    def grid(self) -> list[float]:
        n = int(round((self.k_max - self.k_min) / self.grid_step))
        pts = [round(self.k_min + i * self.grid_step, 10) for i in range(n + 1)]
        return [p for p in pts if p <= self.k_max + 1e-12]


class ObjectiveError(RuntimeError):
    def __init__(self, k: float, cause: BaseException):
        super().__init__(f"objective failed at k={k:.6g}: {cause}")
        self.k = k
        self.cause = cause


class Objective:
    """Memoised improvement-vs-k function with a fresh-evaluation counter."""

    def __init__(self, fn: Callable[[float], float]):
        self._fn = fn
        self._memo: dict[float, float] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    @staticmethod
    def key(k: float) -> float:
        return round(float(k), K_DECIMALS)

    def cached(self, k: float) -> bool:
        with self._lock:
            return self.key(k) in self._memo

    def __call__(self, k: float) -> float:
        kk = self.key(k)
        with self._lock:
            if kk in self._memo:
                return self._memo[kk]
        try:
            value = float(self._fn(kk))
        except ObjectiveError:
            raise
        except Exception as exc:
            raise ObjectiveError(kk, exc) from exc
        with self._lock:
            if kk not in self._memo:
                self._memo[kk] = value
                self.evaluations += 1
            return self._memo[kk]

    @property
    def memo(self) -> dict[float, float]:
        with self._lock:
            return dict(self._memo)


@dataclass
class SearchResult:
    method: Method
    k_star: float
    improvement: float
    evaluations: int
    trace: OptimizerTrace
    stop_reason: str = ""


class _Budget(Exception):
    pass


class _Converged(Exception):
    pass


def _prefer(k: float, f: float, best_k: float | None, best_f: float | None, initial_k: float) -> bool:
    """True if (k, f) should replace the current best; ties go toward initial_k, then smaller k."""
    if best_k is None:
        return True
    if f != best_f:
        return f > best_f
    dk, db = abs(k - initial_k), abs(best_k - initial_k)
    if dk != db:
        return dk < db
    return k < best_k


@dataclass
class _Run:
    """Bookkeeping shared by the searches: budget, trace, best point, stop test."""

    obj: Objective
    cfg: SearchConfig
    method: Method
    check_tolerance: bool = True
    entries: list[TraceEntry] = field(default_factory=list)
    best_k: float | None = None
    best_f: float | None = None
    fresh: int = 0

    def __call__(self, k: float) -> float:
        k = Objective.key(min(max(k, self.cfg.k_min), self.cfg.k_max))
        if self.obj.cached(k):
            return self.obj(k)
        if self.fresh >= self.cfg.max_evaluations:
            raise _Budget
        f = self.obj(k)
        self.fresh += 1
        prev = self.best_f
        accepted = prev is None or f >= prev
        if _prefer(k, f, self.best_k, self.best_f, self.cfg.initial_k):
            self.best_k, self.best_f = k, f
        self.entries.append(TraceEntry(len(self.entries) + 1, k, f, self.best_f))
        if self.check_tolerance and prev is not None and accepted and f - prev < self.cfg.tolerance:
            raise _Converged
        return f

    def result(self, reason: str) -> SearchResult:
        return SearchResult(
            self.method,
            self.best_k,
            self.best_f,
            self.fresh,
            OptimizerTrace(self.method, tuple(self.entries)),
            reason,
        )


def multires_search(obj: Objective, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Coarse grid, natural-spline seed, then best +/- delta refinements."""
    # the schedule is fixed, so the tolerance stop does not apply here
    run = _Run(obj, cfg, Method.MULTIRES, check_tolerance=False)
    grid = cfg.grid()
    try:
        values = [run(k) for k in grid]
        spline = CubicSpline(grid, values, bc_type="natural")
        n = int(round((cfg.k_max - cfg.k_min) / cfg.spline_step))
        dense = np.round(cfg.k_min + cfg.spline_step * np.arange(n + 1), 10)
        center = float(dense[int(np.argmax(spline(dense)))])
        for delta in cfg.refine_deltas:
            for k in (center - delta, center + delta):
                run(k)
            center = run.best_k
        reason = "schedule complete"
    except _Budget:
        reason = "evaluation budget"
    return run.result(reason)


def golden_section(obj: Objective, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Golden-section search on [k_min, k_max] seeded with initial_k as the interior point."""
    run = _Run(obj, cfg, Method.GOLDEN)
    g = lambda k: -run(k)  # noqa: E731
    a, b, c = cfg.k_min, cfg.initial_k, cfg.k_max
    x0, x3 = a, c
    try:
        if c - b > b - a:
            x1, x2 = b, b + CGOLD * (c - b)
        else:
            x2, x1 = b, b - CGOLD * (b - a)
        f1 = g(x1)
        f2 = g(x2)
        while abs(x3 - x0) > cfg.xtol * (abs(x1) + abs(x2)):
            if f2 < f1:
                x0, x1 = x1, x2
                x2 = GOLDEN * x1 + CGOLD * x3
                f1, f2 = f2, g(x2)
            else:
                x3, x2 = x2, x1
                x1 = GOLDEN * x2 + CGOLD * x0
                f2, f1 = f1, g(x1)
        reason = "bracket converged"
    except _Budget:
        reason = "evaluation budget"
    except _Converged:
        reason = "tolerance"
    return run.result(reason)


def brent(obj: Objective, cfg: SearchConfig = SearchConfig(), max_steps: int | None = None) -> SearchResult:
    """Brent's minimiser (parabolic steps with golden-section fallback) on -improvement."""
    run = _Run(obj, cfg, Method.BRENT)
    g = lambda k: -run(k)  # noqa: E731
    a, b = cfg.k_min, cfg.k_max
    x = w = v = cfg.initial_k
    d = e = 0.0
    steps = max_steps if max_steps is not None else 10 * cfg.max_evaluations + 100
    try:
        fx = fw = fv = g(x)
        for _ in range(steps):
            xm = 0.5 * (a + b)
            tol1 = cfg.xtol * abs(x) + 1e-10
            tol2 = 2.0 * tol1
            if abs(x - xm) <= tol2 - 0.5 * (b - a):
                reason = "bracket converged"
                break
            golden_step = True
            if abs(e) > tol1:
                r = (x - w) * (fx - fv)
                q = (x - v) * (fx - fw)
                p = (x - v) * q - (x - w) * r
                q = 2.0 * (q - r)
                if q > 0.0:
                    p = -p
                q = abs(q)
                etemp, e = e, d
                if not (abs(p) >= abs(0.5 * q * etemp) or p <= q * (a - x) or p >= q * (b - x)):
                    d = p / q
                    u = x + d
                    if u - a < tol2 or b - u < tol2:
                        d = math.copysign(tol1, xm - x)
                    golden_step = False
            if golden_step:
                e = (a - x) if x >= xm else (b - x)
                d = CGOLD * e
            u = x + d if abs(d) >= tol1 else x + math.copysign(tol1, d)
            fu = g(u)
            if fu <= fx:
                if u >= x:
                    a = x
                else:
                    b = x
                v, w, x = w, x, u
                fv, fw, fx = fw, fx, fu
            else:
                if u < x:
                    a = u
                else:
                    b = u
                if fu <= fw or w == x:
                    v, w = w, u
                    fv, fw = fw, fu
                elif fu <= fv or v == x or v == w:
                    v, fv = u, fu
        else:
            reason = "step limit"
    except _Budget:
        reason = "evaluation budget"
    except _Converged:
        reason = "tolerance"
    return run.result(reason)


SEARCHES = {
    Method.MULTIRES: multires_search,
    Method.GOLDEN: golden_section,
    Method.BRENT: brent,
}


def search(method: Method, obj: Objective, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    return SEARCHES[method](obj, cfg)
