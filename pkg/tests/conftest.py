import numpy as np
import pytest

from zsqdet import tensor as T
from zsqdet.config import DatasetSpec, TeacherConfig
from zsqdet.data import dataset_from_arrays, render_image
from zsqdet.detector import build_model
from zsqdet.train import train_detector


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at every element of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check_grads(build, inputs: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite differences of ``sum(build(*inputs) * w)``."""
    tensors = [T.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*tensors)
    w = np.random.default_rng(123).standard_normal(out.shape)
    loss = (out * T.Tensor(w)).sum() if out.shape else out
    loss.backward()
    worst = 0.0
    for t in tensors:
        def f():
            with T.no_grad():
                o = build(*[T.Tensor(s.data) for s in tensors])
            return float((o.data * w).sum()) if o.shape else float(o.data)
        worst = max(worst, rel_err(t.grad, numeric_grad(f, t.data, h)))
    return worst


@pytest.fixture(scope="session")
def tiny_data():
    spec = DatasetSpec(num_images=320, seed=3)
    rendered = [render_image(spec, i) for i in range(spec.num_images)]
    imgs = np.stack([r.pixels for r in rendered]).astype(np.float64) / 255.0
    manifest = {"split": {"train": [0, 256], "val": [256, 320]}, "num_classes": 6}
    return dataset_from_arrays(imgs, [r.labels for r in rendered], manifest)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_data):
    """A briefly trained detector: good enough for plumbing tests, not for accuracy claims."""
    model = build_model(seed=0)
    train_detector(model, tiny_data.split("train"), TeacherConfig(epochs=4, lr=3e-3))
    model.set_mode("eval")
    return model


# -- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if call.excinfo is not None:
        status = "FAIL (expected, see ledger)" if item.get_closest_marker("xfail") else "FAIL"
        reason = str(call.excinfo.value).splitlines()[0][:160]
        _CRITERIA[n] = (status, f"{detail} [{reason}]" if detail else reason)
    elif call.when == "call":
        _CRITERIA[n] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:4s}  {detail}")
