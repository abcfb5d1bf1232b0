import pytest
import torch

torch.set_num_threads(1)

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}

CRITERION_NAMES = {
    1: "gradient verification",
    2: "loss-oracle equivalence",
    3: "attention invariants",
    4: "metadata-mask contract",
    5: "desk-scale segmentation",
    6: "desk-scale ablation ordering",
    7: "Grad-CAM sanity",
    8: "metric oracles",
    9: "determinism",
    10: "balancing policy",
}


@pytest.fixture
def criterion():
    """Record a criterion outcome: use as ``with criterion(3, detail): ...``."""

    class _Recorder:
        def __init__(self):
            self.number = None
            self.detail = ""

        def __call__(self, number: int, detail: str = ""):
            self.number, self.detail = number, detail
            return self

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            ok = exc_type is None
            detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
            prev = CRITERIA.get(self.number)
            if prev is not None and not prev[0]:
                ok = False
                detail = prev[1]
            CRITERIA[self.number] = (ok, detail)
            return False

    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERION_NAMES):
        if n not in CRITERIA:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {CRITERION_NAMES[n]}")
            continue
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {CRITERION_NAMES[n]}: {detail}")
