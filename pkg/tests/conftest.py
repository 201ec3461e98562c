import sys

import numpy as np
import pytest

from bottomup.data import ClusterRecord, compute_model_weights


def make_cluster(cid="c1", province=1, region=1, stype="urban", population=10, area=2.0, covariates=(0.0,), weight=None, **kw):
    return ClusterRecord(
        cluster_id=cid,
        province_id=province,
        region_id=region,
        settlement_type=stype,
        population=population,
        footprint_area=area,
        covariates=tuple(covariates),
        sampling_weight=weight,
        **kw,
    )


def random_clusters(rng, n=50, k=2, provinces=2, regions=2):
    """Clusters spread over both settlement types, with model weights set."""
    out = []
    for i in range(n):
        p = 1 + i % provinces
        stype = ("urban", "rural")[(i // provinces) % 2]
        region = (p - 1) * regions + 1 + (i // (2 * provinces)) % regions
        out.append(
            make_cluster(
                cid=f"c{i}",
                province=p,
                region=region,
                stype=stype,
                population=int(rng.integers(0, 300)),
                area=float(rng.uniform(1, 5)),
                covariates=rng.standard_normal(k),
                weight=float(rng.uniform(0.5, 2.0)),
            )
        )
    return compute_model_weights(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
