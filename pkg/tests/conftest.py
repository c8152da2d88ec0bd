import numpy as np
import pytest

from gsfuse.model import GaussianModel, sh_coeff_count


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def random_model(rng, n, sh_degree=0, spread=2.0, log_scale=(-3.0, -1.0)):
    """Random model whose fields are all float32-representable."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianModel(
        f32(rng.uniform(-spread, spread, size=(n, 3))),
        f32(rng.uniform(*log_scale, size=(n, 3))),
        f32(q),
        f32(rng.normal(size=n)),
        f32(rng.normal(size=(n, 3))),
        f32(rng.normal(size=(n, sh_coeff_count(sh_degree), 3))),
    )


def isotropic_model(means, sigma):
    means = np.asarray(means, dtype=np.float64)
    n = len(means)
    return GaussianModel(
        means, np.full((n, 3), np.log(sigma)), np.tile([1.0, 0, 0, 0], (n, 1)),
        np.zeros(n), np.zeros((n, 3)), np.zeros((n, 0, 3)),
    )


def write_raw_ply(path, columns: dict, dtype="<f4"):
    """Independent minimal writer: one float property per dict entry, in order."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    table = np.zeros(n, dtype=[(k, dtype) for k in names])
    for k in names:
        table[k] = columns[k]
    tname = {"<f4": "float", "<f8": "double"}[dtype]
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    head += [f"property {tname} {k}" for k in names] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode())
        fh.write(table.tobytes())


def minimal_columns(n=1, **over):
    cols = {
        "x": np.zeros(n), "y": np.zeros(n), "z": np.zeros(n),
        "f_dc_0": np.zeros(n), "f_dc_1": np.zeros(n), "f_dc_2": np.zeros(n),
        "opacity": np.zeros(n),
        "scale_0": np.zeros(n), "scale_1": np.zeros(n), "scale_2": np.zeros(n),
        "rot_0": np.ones(n), "rot_1": np.zeros(n), "rot_2": np.zeros(n), "rot_3": np.zeros(n),
    }
    cols.update({k: np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)) for k, v in over.items()})
    return cols


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
