import pytest

from structreg.phantom import PhantomSpec

# 32^3 phantom with the same structure as the default, for fast tests
SMALL = dict(dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0), liver_radii=(10.0, 9.0, 11.0),
             liver_jitter=0.5, branches=3, max_displacement=1.5, bump_sigma=5.0)


@pytest.fixture
def small_spec():
    def make(**kw):
        return PhantomSpec(**{**SMALL, **kw})
    return make


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
