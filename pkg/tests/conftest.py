import numpy as np
import pytest
from PIL import Image

from temporal_ssl.synthclips import GeneratorConfig, VideoRecord, generate_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 train / 8 test videos, 64 frames of 32x32."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = GeneratorConfig(length=64, size=32, object_radius=(3, 5), circle_radius=(4, 6))
    train, test = generate_corpus(cfg, 12, 8, seed=1, out_dir=root)
    return root, train, test


def write_video(directory, frames):
    directory.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        Image.fromarray(f).save(directory / f"{t:06d}.png")
    return VideoRecord(str(directory), 0, len(frames), 0)


@pytest.fixture
def static_video(tmp_path):
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, size=(40, 50, 3), dtype=np.uint8)
    return write_video(tmp_path / "static", [frame] * 20)


@pytest.fixture
def ramp_video(tmp_path):
    # frame t is filled with value t, so the source index is readable from pixels
    frames = [np.full((20, 24, 3), t, dtype=np.uint8) for t in range(130)]
    return write_video(tmp_path / "ramp", frames)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
