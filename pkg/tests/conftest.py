import numpy as np
import pytest

from bootstap.synthdata import domain_config, generate_scene
from bootstap.tracker import ModelConfig, init_params


@pytest.fixture(scope="session")
def scene_a():
    return generate_scene(domain_config("A", 3))


@pytest.fixture(scope="session")
def scene_b():
    return generate_scene(domain_config("B", 4))


@pytest.fixture(scope="session")
def small_scenes():
    return [generate_scene(domain_config("A", i, T=6, H=32, W=32, size_range=(5.0, 9.0), n_tracks=12)) for i in range(3)]


@pytest.fixture()
def params64():
    return init_params(0, ModelConfig(dtype="float64"))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture()
def criterion(request):
    """Record the outcome of one numbered acceptance criterion."""
    import contextlib

    @contextlib.contextmanager
    def record(number: int, title: str):
        detail = {"text": ""}
        try:
            yield detail
        except BaseException as exc:
            ACCEPTANCE[number] = (False, f"{title}: {detail['text'] or ''} {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".strip())
            print(f"criterion {number}: FAIL {title} {detail['text']}")
            raise
        ACCEPTANCE[number] = (True, f"{title}: {detail['text']}".rstrip(": "))
        print(f"criterion {number}: PASS {title} {detail['text']}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {text}")
