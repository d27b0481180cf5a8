import numpy as np
import pytest

from tablegraph.model import ModelConfig
from tablegraph.synth import TableSample, WordVertex


def tiny_config(kind="dgcnn_star", **kw):
    base = dict(
        kind=kind, image_h=32, image_w=32,
        cnn_widths=(4, 4, 6, 6), fcnn_widths=(8, 8), dgcnn_widths=(8, 8),
        gravnet_widths=(8, 8), gravnet_features=4, k=3, head_widths=(8, 6),
    )
    base.update(kw)
    return ModelConfig(**base)


def toy_sample(seed=0, v=6, size=32):
    """Random page with ``v`` boxes in a 2-column layout (third row merged)."""
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(size, size)).astype(np.uint8)
    layout = [  # cell, rows, cols
        (0, (0,), (0,)), (1, (0,), (1,)), (2, (1,), (0,)),
        (2, (1,), (0,)), (3, (1, 2), (1,)), (4, (2,), (0,)),
    ][:v]
    verts = []
    for cell, rows, cols in layout:
        x0, y0 = rng.uniform(0, size - 8, size=2)
        w, h = rng.uniform(2, 7, size=2)
        verts.append(WordVertex((float(x0), float(y0), float(x0 + w), float(y0 + h)),
                                int(rng.integers(1, 6)), cell, rows, cols))
    return TableSample(img, tuple(verts), 3, seed)


def smooth_gradient_check(kind, config, sample, eps=1e-5, max_entries=None, attempts=10):
    """Gradient check of the full model at a point where every probe is kink-free.

    Zero-initialised biases put relus exactly on their kink, so biases are
    jittered; a point is rejected (and the next jitter seed tried) only when a
    probe flips a relu/max/gather decision, never because of its error.
    Returns ``(worst_by_param, seeds_tried)``.
    """
    from tablegraph.gradcheck import KinkCrossed, check_gradients
    from tablegraph.model import TableGraphModel
    from tablegraph.trainer import pair_loss

    for attempt in range(attempts):
        model = TableGraphModel(config)
        jitter = np.random.default_rng(attempt)
        for name, t in model.params.items():
            if name.endswith(".b"):
                t.data = t.data + jitter.normal(scale=0.1, size=t.shape)

        def build():
            res = model.forward(sample, "train", s=4, rng=np.random.default_rng(0))
            return pair_loss(res.logits, res.pairs, sample.gt)[0]

        names = [n for n, _ in model.params.items()]
        try:
            worst = check_gradients(build, [t for _, t in model.params.items()], eps=eps,
                                    max_entries=max_entries, rng=np.random.default_rng(attempt), strict=True)
        except KinkCrossed:
            continue
        return {names[k]: v for k, v in worst.items()}, attempt + 1
    raise RuntimeError(f"{kind}: no kink-free point in {attempts} attempts")


@pytest.fixture
def toy():
    return toy_sample()


# -- acceptance report ------------------------------------------------------------------

ACCEPTANCE: list[str] = []


def record_acceptance(criterion, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
