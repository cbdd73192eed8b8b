import numpy as np
import pytest

from carope import data as dt


def central_diff(loss_fn, arr: np.ndarray, h: float) -> np.ndarray:
    """Exhaustive central finite differences of a scalar function w.r.t. arr,
    mutating and restoring arr in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        out[i] = (lp - lm) / (2.0 * h)
    return grad.astype(arr.dtype)


def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(fd).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic.astype(np.float64) - fd.astype(np.float64)).max()) / denom


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    dt.write_corpus(path, 300_000, seed=0)
    return path


@pytest.fixture(scope="session")
def corpus(corpus_path):
    return dt.ingest(corpus_path)
