import pytest

from foodenergy.synthetic import SynthConfig, generate_synthetic_dataset

ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"[AC{number:02d}] {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_small")
    manifest = generate_synthetic_dataset(SynthConfig(n_dishes=12, seed=3), out)
    return out, manifest


def synthetic_pairs(n=10, side=64, seed=0):
    """RGB images and signed ground-truth density maps for ``n`` rendered dishes."""
    import numpy as np

    from foodenergy.density import (SIGNED, build_raw_density_map, compute_dataset_scale,
                                    scale_density_map)
    from foodenergy.synthetic import render_dish

    config = SynthConfig(n_dishes=n, image_side=side, seed=seed)
    dishes = [render_dish(config, i) for i in range(n)]
    raw = [build_raw_density_map(d.mask, [i.energy_kcal for i in d.ingredients]) for d in dishes]
    scale = compute_dataset_scale(raw)
    X = np.stack([d.rgb for d in dishes])
    y = np.stack([scale_density_map(m, SIGNED, scale).values for m in raw]).astype(np.float32)
    return X, y


@pytest.fixture(scope="session")
def gan_pairs():
    return synthetic_pairs()
