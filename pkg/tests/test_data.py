import math

import numpy as np
import pytest
import yaml

from copulajm.data import (
    DataError,
    ModelSpec,
    ParamLayout,
    ParamVector,
    from_unconstrained,
    load_design,
    parse_dataset,
    to_unconstrained,
    write_dataset,
)
from copulajm.simulation import simulate_dataset, study1_truth

DESIGN = {
    "schedule": [0, 2, 6, 12, 18],
    "longitudinal_terms": ["time", "time:drug", "gender"],
    "survival_terms": ["drug", "gender"],
    "copula": "gaussian",
    "within": "exchangeable",
    "cross": "constant",
}


@pytest.fixture
def files(tmp_path):
    design = tmp_path / "design.yaml"
    design.write_text(yaml.safe_dump(DESIGN))
    surv = tmp_path / "surv.csv"
    surv.write_text("id,event_time,status,drug,gender\n1,10.5,1,1,0\n2,3.0,0,0,1\n3,20,0,1,1\n")
    long_ = tmp_path / "long.csv"
    long_.write_text("id,visit_index,time,y\n1,1,0,10.2\n1,3,6,9.1\n2,1,0,7.7\n3,1,0,5\n3,2,2,5.5\n")
    return design, surv, long_


def test_parse_builds_designs(files):
    design, surv, long_ = files
    ds = parse_dataset(long_, surv, design)
    assert len(ds) == 3 and ds.long_names == ("(Intercept)", "time", "time:drug", "gender")
    s1 = ds.subject(1)
    assert list(s1.visits) == [0, 2]
    assert np.array_equal(s1.X1, [[1, 0, 0, 0], [1, 6, 6, 0]])
    assert np.array_equal(s1.x2, [1, 1, 0])
    assert ds.subject(2).m == 1 and ds.subject(3).m == 2
    assert np.array_equal(ds.event, [1, 0, 0])


def test_survival_only(files, tmp_path):
    design, surv, _ = files
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    for lf in (None, empty):
        ds = parse_dataset(lf, surv, design)
        assert np.all(ds.n_measurements == 0)


@pytest.mark.parametrize("surv_text,long_text,needle", [
    ("id,event_time,status,drug,gender\n1,10.5,1,1,\n", "id,visit_index,time,y\n", "row 2"),
    ("id,event_time,status,drug,gender\n1,10.5,1,1,0\n", "id,visit_index,time,y\n1,1,0,1\n1,1,0,2\n", "duplicate"),
    ("id,event_time,status,drug,gender\n1,10.5,1,1,0\n", "id,visit_index,time,y\n9,1,0,1\n", "absent"),
    ("id,event_time,status,drug,gender\n1,10.5,1,1,0\n", "id,visit_index,time,y\n1,2,3,1\n", "scheduled"),
    ("id,event_time,status,drug,gender\n1,5,1,1,0\n", "id,visit_index,time,y\n1,3,6,1\n", "not before"),
    ("id,event_time,status,drug,gender\n1,5,1,1,0\n", "id,visit_index,time,y\n1,1,0,nan\n", "row 2"),
    ("id,event_time,status,drug\n1,5,1,1\n", "id,visit_index,time,y\n", "gender"),
    ("id,event_time,status,drug,gender\n1,5,2,1,0\n", "id,visit_index,time,y\n", "status"),
])
def test_parse_errors(tmp_path, surv_text, long_text, needle):
    design = tmp_path / "d.yaml"
    design.write_text(yaml.safe_dump(DESIGN))
    (tmp_path / "s.csv").write_text(surv_text)
    (tmp_path / "l.csv").write_text(long_text)
    with pytest.raises(DataError, match=needle):
        parse_dataset(tmp_path / "l.csv", tmp_path / "s.csv", design)


def test_design_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**DESIGN, "copula": "t"}))
    with pytest.raises(DataError, match="df"):
        load_design(bad)
    bad.write_text(yaml.safe_dump({**DESIGN, "schedule": [0, 2, 2]}))
    with pytest.raises(DataError, match="increasing"):
        load_design(bad)


def test_write_parse_round_trip(tmp_path):
    truth = study1_truth(0.0225, n=50, seed=4)
    ds = simulate_dataset(truth)
    write_dataset(ds, tmp_path / "l.csv", tmp_path / "s.csv")
    again = parse_dataset(tmp_path / "l.csv", tmp_path / "s.csv", (ds.schedule, truth.spec))
    for a, b in zip(ds.subjects, again.subjects):
        assert a.id == b.id and a.event == b.event and a.time == b.time
        assert np.array_equal(a.visits, b.visits) and np.array_equal(a.y, b.y)
        assert np.array_equal(a.X1, b.X1) and np.array_equal(a.x2, b.x2)


def test_unconstrained_examples():
    layout = ParamLayout(("(Intercept)",), ("(Intercept)",), "constant", 5)
    th = ParamVector([1.0], [-2.0], 2.0, 3.0, [0.6], 0.0)
    v = to_unconstrained(th, layout)
    assert v[3] == pytest.approx(math.log(3.0), abs=1e-15)
    assert v[4] == pytest.approx(0.5 * math.log(1.6 / 0.4), abs=1e-15)
    assert v[5] == 0.0
    back = from_unconstrained(v, layout)
    assert np.allclose(back.to_array(), th.to_array(), rtol=1e-12, atol=1e-12)


def test_unconstrained_round_trip_and_totality():
    rng = np.random.default_rng(0)
    layout = ParamLayout(("a", "b"), ("c",), "unstructured", 4)
    for _ in range(200):
        a = np.r_[rng.normal(size=3), rng.uniform(0.01, 10, 2), rng.uniform(-0.999, 0.999, 5)]
        th = layout.unpack(a)
        assert np.allclose(from_unconstrained(to_unconstrained(th, layout), layout).to_array(), a, rtol=1e-12, atol=1e-12)
    for v in (np.full(layout.size, 1e3), np.full(layout.size, -1e3)):
        th = from_unconstrained(v, layout)
        assert th.sigma >= 0 and th.r >= 0 and np.all(np.abs(th.rho_ty) < 1) and abs(th.rho_y) < 1


def test_layout_names():
    layout = ParamLayout(("(Intercept)", "time"), ("(Intercept)",), "unstructured", 3)
    assert layout.names == ["beta1:(Intercept)", "beta1:time", "beta2:(Intercept)", "r", "sigma",
                            "rho_ty[1]", "rho_ty[2]", "rho_ty[3]", "rho_y"]
    assert ParamLayout(("x",), ("y",), "zero", 3).size == 5


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("t", 2.0)
    with pytest.raises(ValueError):
        ModelSpec("clayton")
    assert ModelSpec("gaussian", 4.0).df is None
    assert ModelSpec("t", 4).with_(copula="gaussian").df is None
