"""Central finite-difference gradient checking for the autodiff engine."""
from __future__ import annotations

import numpy as np

from . import engine as E


class KinkCrossed(ArithmeticError):
    """A finite-difference probe changed a piecewise decision, so it is not a valid reference."""


def decisions(loss: E.Tensor) -> list[bytes]:
    """Discrete choices recorded on the tape (relu masks, argmaxes, gather indices)."""
    out, seen, stack = [], set(), [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.decision is not None:
            out.append(node.op.encode() + np.ascontiguousarray(node.decision).tobytes())
        stack.extend(node.parents)
    return out


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(build_loss, leaves, eps: float = 1e-5, max_entries: int | None = None,
                    rng=None, floor: float = 1e-6, strict: bool = False) -> dict:
    """Compare backprop against central differences on each leaf tensor.

    ``build_loss()`` must rebuild the scalar loss from the current leaf data.
    With ``max_entries`` only that many randomly chosen entries per leaf are
    perturbed. Returns the worst relative error per leaf index. With
    ``strict`` a probe that flips any relu/max/gather decision raises
    KinkCrossed instead of being scored.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in leaves:
        t.grad = np.zeros_like(t.data)
    base = build_loss()
    E.backward(base)
    analytic = [t.grad.copy() for t in leaves]
    ref = decisions(base) if strict else None

    def probe():
        loss = build_loss()
        if strict and decisions(loss) != ref:
            raise KinkCrossed(f"leaf {k} entry {idx}: probe at eps={eps} crosses a kink")
        return float(loss.data)

    worst = {}
    for k, (t, ga) in enumerate(zip(leaves, analytic)):
        n = t.data.size
        flat_idx = np.arange(n)
        if max_entries is not None and n > max_entries:
            flat_idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        errs = []
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.data.shape)
            orig = t.data[idx]
            try:
                t.data[idx] = orig + eps
                fp = probe()
                t.data[idx] = orig - eps
                fm = probe()
            finally:
                t.data[idx] = orig
            num = (fp - fm) / (2 * eps)
            errs.append(float(relative_error(ga[idx], num, floor)))
        worst[k] = max(errs) if errs else 0.0
    return worst
