import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("dev", max_examples=10, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

np.seterr(all="warn")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def oracle_scene():
    """Three-object scene decomposed through the analytic OracleField."""
    from scenetok.decomp import decompose, sample_rays
    from scenetok.oraclefield import OracleField
    from scenetok.scenegen import build_scene, make_trajectory, random_scene

    spec = random_scene(3, seed=1, vd_strength=0.5)
    orc = build_scene(spec)
    poses = make_trajectory(spec, 24, seed=0)
    field = OracleField(orc)
    graph = decompose(field, poses, rays=sample_rays(field, poses, 4096, seed=0))
    return {"spec": spec, "oracle": orc, "poses": poses, "field": field, "graph": graph}


# fitted fields ----------------------------------------------------------------
# Desk-scale seeded fits shared by the module tests and the acceptance suite.
# Each takes one to three minutes on a single CPU core.

HELD_OUT = dict(n=7, seed=5, index=3)


def _token_fit(vd_strength):
    import time

    from scenetok.fields import TrainConfig, fit_token_field, init_fields
    from scenetok.scenegen import build_scene, make_trajectory, random_scene, render_teacher_views

    spec = random_scene(2, seed=3, vd_strength=vd_strength)
    orc = build_scene(spec)
    poses = make_trajectory(spec, 48, seed=0)
    teacher = render_teacher_views(orc, poses)
    cfg = TrainConfig.desk()
    t0 = time.perf_counter()
    fs, curve = fit_token_field(init_fields(cfg, spec.bounds, spec.d_tok), teacher, cfg)
    held = make_trajectory(spec, HELD_OUT["n"], seed=HELD_OUT["seed"])[HELD_OUT["index"]]
    return {"spec": spec, "oracle": orc, "poses": poses, "teacher": teacher, "fs": fs, "curve": curve,
            "held_out": held, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def vi_fit():
    """Two objects, view-independent teacher, desk preset, 48 views."""
    return _token_fit(0.0)


@pytest.fixture(scope="session")
def vd_fit():
    """Same scene with a direction-dependent teacher (strength 0.5)."""
    return _token_fit(0.5)


@pytest.fixture(scope="session")
def grounded_fit(vi_fit):
    """vi_fit plus a segmentation field, decomposed at the default ray budget."""
    import copy
    import time

    from scenetok.decomp import decompose
    from scenetok.segfield import SegConfig, fit_seg_field

    fs = copy.deepcopy(vi_fit["fs"])
    t0 = time.perf_counter()
    fs, curve = fit_seg_field(fs, vi_fit["teacher"], SegConfig.desk())
    graph = decompose(fs, vi_fit["poses"])
    return {**vi_fit, "fs": fs, "graph": graph, "seg_curve": curve, "seconds": time.perf_counter() - t0}


def _seg_fit(n_objects, seed=1, views=24, part_gap=0.0):
    import time

    from scenetok.decomp import decompose
    from scenetok.fields import TrainConfig, fit_geometry, init_fields
    from scenetok.scenegen import build_scene, make_trajectory, random_scene, render_teacher_views
    from scenetok.segfield import SegConfig, fit_seg_field

    spec = random_scene(n_objects, seed=seed, part_gap=part_gap)
    orc = build_scene(spec)
    poses = make_trajectory(spec, views, seed=0)
    teacher = render_teacher_views(orc, poses)
    cfg = TrainConfig(steps=0, geometry_steps=1000, rays_per_batch=256, samples_per_ray=48, resolutions=(16, 32, 64))
    t0 = time.perf_counter()
    fs = init_fields(cfg, spec.bounds, spec.d_tok)
    fit_geometry(fs, teacher, cfg)
    fs, curve = fit_seg_field(fs, teacher, SegConfig.desk())
    graph = decompose(fs, poses)
    return {"spec": spec, "oracle": orc, "poses": poses, "teacher": teacher, "fs": fs, "graph": graph,
            "seg_curve": curve, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def seg_fit_2():
    """Two objects with separated parts (part_gap 0.3): geometry + segmentation field."""
    return _seg_fit(2, part_gap=0.3)


@pytest.fixture(scope="session")
def seg_fit_5():
    return _seg_fit(5, part_gap=0.3)


@pytest.fixture(scope="session")
def seg_fit_touching_2():
    """Standard generator: parts share surfaces."""
    return _seg_fit(2)


@pytest.fixture(scope="session")
def seg_fit_touching_5():
    return _seg_fit(5)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda l: int(l.split()[1][1:].rstrip(":"))):
            terminalreporter.write_line(line)
