import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protoseg.prototype_bank import PrototypeBank  # noqa: E402


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def make_bank(protos, subclass_of, class_of_subclass=None, sources=None):
    subclass_of = np.asarray(subclass_of)
    S = int(subclass_of.max()) + 1
    cos = np.arange(S) if class_of_subclass is None else np.asarray(class_of_subclass)
    K = int(cos.max()) + 1
    return PrototypeBank(
        prototypes=protos,
        subclass_of=subclass_of,
        class_of_subclass=cos,
        subclass_names=[f"s{i}" for i in range(S)],
        classes=[f"c{k}" for k in range(K)],
        sources=sources if sources is not None else ["test"] * len(protos),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
