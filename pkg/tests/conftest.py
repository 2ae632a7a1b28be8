import numpy as np
import pytest

from confloop.dataset import CovariateMeta, Dataset, Sample


def binary_meta(*names: str) -> list[CovariateMeta]:
    return [
        CovariateMeta(name=n, description=f"{n} flag on record", kind="binary", levels=("0", "1"))
        for n in names
    ]


def make_dataset(meta, y, w, columns) -> Dataset:
    """Assemble a dataset from parallel arrays; columns maps name -> values."""
    n = len(y)
    samples = []
    for i in range(n):
        covs = {m.name: columns[m.name][i] for m in meta}
        samples.append(Sample(f"s{i:04d}", float(y[i]), int(w[i]), covs))
    return Dataset(meta, samples)


@pytest.fixture
def two_group_ds() -> Dataset:
    """Noiseless fixture: effect +2 when G=1, 0 when G=0; balanced arms."""
    n = 400
    g = np.array(["1" if i % 2 == 0 else "0" for i in range(n)])
    w = np.array([1 if (i // 2) % 2 == 0 else 0 for i in range(n)])
    tau = np.where(g == "1", 2.0, 0.0)
    y = w * tau
    meta = binary_meta("G", "H")
    h = np.array(["1" if (i // 4) % 2 == 0 else "0" for i in range(n)])
    return make_dataset(meta, y, w, {"G": g, "H": h})


@pytest.fixture
def tiny_ds() -> Dataset:
    meta = binary_meta("HTN", "DM")
    rng = np.random.default_rng(5)
    n = 40
    y = rng.normal(size=n)
    w = np.array([i % 2 for i in range(n)])
    htn = np.array([str((i // 2) % 2) for i in range(n)])
    dm = np.array([str((i // 4) % 2) for i in range(n)])
    return make_dataset(meta, y, w, {"HTN": htn, "DM": dm})
