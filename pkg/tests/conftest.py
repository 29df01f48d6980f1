from types import SimpleNamespace

import numpy as np
import pytest
import torch

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def _cfg(V_total, **kw):
    base = dict(
        V_total=V_total,
        mask_id=V_total - 3,
        pad_id=V_total - 2,
        bos_id=V_total - 1,
        time_conditioning=False,
        causal=False,
        L=None,
    )
    base.update(kw)
    return SimpleNamespace(**base)


class UniformOracle:
    """Uniform over the ``n_blocks`` block tokens at masked slots; copies everything else."""

    def __init__(self, n_blocks):
        self.cfg = _cfg(n_blocks + 3)
        self.n_blocks = n_blocks

    def log_probs(self, tokens, positions, t=None, check_finite=False):
        z = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        V = self.cfg.V_total
        out = torch.full(z.shape + (V,), -np.inf, dtype=torch.float64)
        out[..., : self.n_blocks] = -np.log(self.n_blocks)
        hot = torch.nn.functional.one_hot(z, V).bool()
        point = torch.where(hot, 0.0, -np.inf).double()
        return torch.where((z != self.cfg.mask_id)[..., None], point, out)


class PerfectOracle:
    """Knows the clean sequence: point mass on the truth at every slot."""

    def __init__(self, n_blocks, clean):
        self.cfg = _cfg(n_blocks + 3)
        self.clean = torch.as_tensor(np.asarray(clean), dtype=torch.long)

    def log_probs(self, tokens, positions, t=None, check_finite=False):
        hot = torch.nn.functional.one_hot(self.clean, self.cfg.V_total).bool()
        return torch.where(hot, 0.0, -np.inf).double()


@pytest.fixture
def uniform_oracle():
    return UniformOracle


@pytest.fixture
def perfect_oracle():
    return PerfectOracle


def record(name: str, passed, detail: str = ""):
    """``passed`` is True, False or None (skipped)."""
    ACCEPTANCE_RESULTS.append((name, passed, detail))
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    print(f"[{status}] {name} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"{status}  {name}  {detail}")
