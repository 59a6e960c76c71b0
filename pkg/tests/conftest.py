import pytest

from eesrdet.synthdata import generate_synthetic
from eesrdet.training import TrainConfig

TINY = dict(
    batch_size=2, lr=1e-3, max_steps=4, lr_halving_interval=1000,
    generator=dict(n_blocks=1, base_channels=8, growth_channels=4),
    een=dict(n_blocks=1, base_channels=8, growth_channels=4),
    discriminator=dict(base_channels=8, image_size=32),
    detector=dict(channels=8),
    features=dict(channels=(8,)),
)


@pytest.fixture(scope="session")
def small_tiles():
    return generate_synthetic(12, hr_size=32, objects_per_tile=(1, 2), object_size=(4, 8), seed=1)


@pytest.fixture
def tiny_cfg():
    def make(**over):
        from eesrdet.training import _deep_merge
        return TrainConfig.from_dict(_deep_merge(TINY, over))
    return make


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion; the summary prints one line each."""
    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (ok, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
