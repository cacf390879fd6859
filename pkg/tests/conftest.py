import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from dpiqa.dataset import synthetic_quality_set  # noqa: E402
from dpiqa.model import ModelConfig  # noqa: E402


def smoke_config(**overrides) -> ModelConfig:
    """Narrow mini backbone and decoder; default template and head."""
    base = dict(
        cond_width=64,
        unet_channels=(16, 16, 32, 32),
        attention_heads=1,
        qfd_channels=32,
        qfd_reduce=(32, 16, 8, 8),
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    """Small enough for double-precision finite differences: d=16, 8x8 latent."""
    from dpiqa.conditioning import numbered_template

    base = dict(
        cond_width=16,
        unet_channels=(8, 8, 8, 8),
        attention_heads=1,
        qfd_channels=8,
        qfd_reduce=(8, 8, 8, 8),
        se_reduction=4,
        head_hidden=(16, 8),
        image_size=64,
        adapter_widths=(4, 4, 4, 4),
        text_adapter_hidden=8,
        template=numbered_template(2, 2, 2),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_toy_manifest(root: Path, n: int = 16, size: int = 128, seed: int = 0, dataset_id: str = "toy", name: str = "toy") -> Path:
    ds = synthetic_quality_set(n, size=size, seed=seed)
    root.mkdir(parents=True, exist_ok=True)
    rows = ["image_path,mos"]
    for i in range(n):
        x, y = ds[i]
        arr = ((x.permute(1, 2, 0).numpy() + 1) * 127.5).round().clip(0, 255).astype(np.uint8)
        Image.fromarray(arr).save(root / f"{name}{i:02d}.png")
        rows.append(f"{name}{i:02d}.png,{1 + 4 * float(y):.6f}")
    manifest = root / f"{name}.csv"
    manifest.write_text("\n".join(rows) + "\n")
    (root / f"{name}.meta").write_text(f"dataset_id = {dataset_id}\nscale_min = 1\nscale_max = 5\n")
    return manifest


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory) -> Path:
    return write_toy_manifest(tmp_path_factory.mktemp("toy"))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# One PASS/FAIL line per acceptance criterion, printed after the run.
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    n = props["criterion"]
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    previous = _CRITERIA.get(n)
    if previous is None or previous[0] == "PASS" or status == "FAIL":
        _CRITERIA[n] = (status, props.get("detail", ""))


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}".rstrip())
