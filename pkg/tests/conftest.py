import numpy as np
import pytest

from rsnlab.nifti_io import make_volume


def blob_phantom(shape=(32, 36, 30), seed=0, n_blobs=6):
    """Smooth, asymmetric test object on a black background."""
    rng = np.random.default_rng(seed)
    idx = np.indices(shape, dtype=np.float64)
    img = np.zeros(shape)
    lo = np.array(shape) * 0.3
    hi = np.array(shape) * 0.7
    for _ in range(n_blobs):
        c = rng.uniform(lo, hi)
        s = rng.uniform(1.5, 3.0)
        r2 = sum((idx[i] - c[i]) ** 2 for i in range(3))
        img += rng.uniform(0.5, 2.0) * np.exp(-r2 / (2 * s * s))
    return img


@pytest.fixture
def phantom():
    return blob_phantom()


@pytest.fixture
def phantom_volume(phantom):
    return make_volume(phantom, (3.0, 3.0, 3.0))


SMALL_RUN = {
    "synth": {"n_subjects": 4, "dims": [20, 24, 20], "n_timepoints": 30, "n_networks": 3, "blob_sigma_vox": 1.5},
    "groupica": {"model_order": 4},
}

SMALL_TOML = """\
run_id = "small"
output_dir = "runs"
[synth]
n_subjects = 4
dims = [20, 24, 20]
n_timepoints = 30
n_networks = 3
blob_sigma_vox = 1.5
[groupica]
model_order = 4
"""


def small_config(out_dir, run_id="small", **extra):
    from rsnlab.pipeline import make_config

    overrides = {**SMALL_RUN, "output_dir": str(out_dir), "run_id": run_id}
    for section, values in extra.items():
        overrides[section] = {**overrides.get(section, {}), **values} if isinstance(values, dict) else values
    return make_config(overrides)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    from rsnlab.pipeline import Pipeline

    pipe = Pipeline(small_config(tmp_path_factory.mktemp("runs")))
    manifests = pipe.run_all()
    return pipe, manifests


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
