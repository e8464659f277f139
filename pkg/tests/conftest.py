import pytest

from anigan.bundle import write_bundle
from anigan.nets import GeneratorSpec, build_generator
from anigan.tagspace import LabelPrior

# Small generator with the full 128x128 output geometry, cheap enough for unit tests.
SERVE_G = GeneratorSpec(noise_dim=16, cond_dim=34, base_channels=4, base_spatial=16, n_resblocks=1,
                        n_upscales=3, output_size=128, final_kernel=3)


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    write_bundle(build_generator(SERVE_G, 0).eval(), out, LabelPrior.reference())
    return out


CRITERIA = {
    1: "loss oracle suite",
    2: "gradient-penalty closed form",
    3: "Frechet closed forms",
    4: "FID self-distance calibration",
    5: "DRAGAN stability surrogate",
    6: "conditional learning surrogate",
    7: "sampler frequencies",
    8: "shape, range and determinism",
    9: "end to end",
}
_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        _outcomes.setdefault(marker.args[0], []).append(not failed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if results is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")
