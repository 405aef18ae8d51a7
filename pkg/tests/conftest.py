import pytest
import torch

from apsnet.dataset import long_tail_config, size_only_config, synth_generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def size_only_corpus(tmp_path_factory):
    """Two classes, 12 images each at 64 px (9 train / 3 test per class)."""
    return synth_generate(size_only_config(per_class=12, image_size=64), tmp_path_factory.mktemp("size_only"))


@pytest.fixture(scope="session")
def small_long_tail(tmp_path_factory):
    cfg = long_tail_config(n_classes=4, head=20, tail=5, image_size=64, rng_seed=3)
    return synth_generate(cfg, tmp_path_factory.mktemp("long_tail"))


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the test still asserts on its own."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        print(line)
        request.config.stash[_VERDICTS].append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config.stash.get(_VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
