import json

import numpy as np
import pytest

from lsnmflow.bench import (
    TUEBINGEN_EXCLUDED, BenchmarkSuite, BenchResult, DatasetOutcome, MalformedPair, MissingMeta,
    config_hash, load_sim, load_suite, load_tuebingen, results_dir, run_benchmark, synthetic_suite,
)
from lsnmflow.core import Direction, PairDataset
from lsnmflow.flow import FlowConfig

FAST = FlowConfig(epochs=15, hidden_width=2, n_subflows=1)


def _write_pair(path, arr):
    np.savetxt(path, arr)


@pytest.fixture
def tuebingen_dir(tmp_path):
    rng = np.random.default_rng(0)
    lines = []
    for pid in (1, 2, 3, 52, 70, 8):
        x = rng.normal(size=60)
        y = np.tanh(x) + 0.3 * rng.normal(size=60)
        if pid == 8:
            _write_pair(tmp_path / f"pair{pid:04d}.txt", np.column_stack([x, y, y + x]))
            lines.append(f"{pid} 1 2 3 3 0.5")  # multivariate cause
            continue
        _write_pair(tmp_path / f"pair{pid:04d}.txt", np.column_stack([x, y]))
        if pid == 2:
            lines.append(f"{pid} 2 2 1 1 0.25")  # cause is the second column
        else:
            lines.append(f"{pid} 1 1 2 2 1")
    (tmp_path / "pairmeta.txt").write_text("\n".join(lines) + "\n")
    return tmp_path


def test_load_tuebingen(tuebingen_dir):
    s = load_tuebingen(tuebingen_dir)
    assert [d.meta["id"] for d in s.datasets] == [1, 2, 3]
    assert 52 in s.exclusions and 70 in s.exclusions
    d2 = s.datasets[1]
    assert d2.truth == Direction.BACKWARD and d2.weight == 0.25
    assert abs(d2.x.mean()) < 1e-12 and abs(d2.y.var() - 1) < 1e-12


def test_tuebingen_exclusion_list():
    assert TUEBINGEN_EXCLUDED == (47, 52, 53, 54, 55, 70, 71, 105, 107)


def test_tuebingen_missing_meta(tmp_path):
    with pytest.raises(MissingMeta):
        load_tuebingen(tmp_path)


def test_tuebingen_malformed(tuebingen_dir):
    (tuebingen_dir / "pair0003.txt").write_text("1 2\n3 4 5\n")
    with pytest.raises(MalformedPair) as exc:
        load_tuebingen(tuebingen_dir)
    assert exc.value.ident == 3


@pytest.fixture
def sim_dir(tmp_path):
    root = tmp_path / "SIM-G"
    root.mkdir()
    rng = np.random.default_rng(1)
    truths = []
    for i in range(1, 5):
        x = rng.normal(size=1000)
        _write_pair(root / f"pair{i:04d}.txt", np.column_stack([x, x**2 + rng.normal(size=1000)]))
        truths.append("1" if i % 2 else "-1")
    (root / "pairs_gt.txt").write_text("\n".join(truths) + "\n")
    return tmp_path


def test_load_sim(sim_dir):
    s = load_sim(sim_dir, "sim-g")
    assert len(s) == 4 and all(d.n == 1000 and d.weight == 1.0 for d in s.datasets)
    assert [d.truth for d in s.datasets] == [Direction.FORWARD, Direction.BACKWARD] * 2
    with pytest.raises(ValueError):
        load_sim(sim_dir, "sim-x")


def test_sim_row_mismatch(sim_dir):
    _write_pair(sim_dir / "SIM-G" / "pair0002.txt", np.ones((999, 2)) * np.arange(999)[:, None])
    with pytest.raises(MalformedPair, match="pair0002"):
        load_sim(sim_dir / "SIM-G", "sim-g")


def test_suite_invariants():
    with pytest.raises(ValueError):
        BenchmarkSuite("x", [PairDataset([1, 2], [3, 4])])
    with pytest.raises(ValueError):
        BenchmarkSuite("x", [PairDataset([1, 2], [3, 4], truth="forward", weight=0)])


def test_synthetic_suite_shape():
    s = synthetic_suite(n=50)
    assert len(s) == 60
    assert sum(d.truth == Direction.FORWARD for d in s.datasets) == 30


def _outcome(name, w, correct):
    return DatasetOutcome(name, w, "forward", "forward" if correct else "backward", 0.1, 0.2)


def test_weighted_accuracy():
    r = BenchResult("s", "it", {}, [_outcome("a", 1, True), _outcome("b", 1, False), _outcome("c", 1, True)])
    assert abs(r.weighted_accuracy - r.accuracy) < 1e-12
    r = BenchResult("s", "it", {}, [_outcome("a", 3, True), _outcome("b", 1, False)])
    assert r.weighted_accuracy == 0.75 and r.accuracy == 0.5
    r = BenchResult("s", "it", {}, [_outcome("a", 0.1, True), _outcome("b", 0.7, True), _outcome("c", 0.2, True)])
    assert r.weighted_accuracy == 1.0


def test_no_conclusion_is_incorrect():
    o = DatasetOutcome("a", 1.0, "forward", "no_conclusion", 0.0, 0.0)
    assert not o.correct


@pytest.fixture(scope="module")
def tiny_suite():
    s = synthetic_suite(n=80, seeds=range(1))
    return BenchmarkSuite("synthetic", s.datasets[:4])


def test_run_benchmark_and_roundtrip(tiny_suite, tmp_path):
    r = run_benchmark(tiny_suite, "it", FAST, None, base_seed=7)
    assert len(r.outcomes) == 4
    assert r.config["base_seed"] == 7 and r.config["train_fraction"] == 1.0
    back = BenchResult.from_json(r.to_json())
    assert back.to_json() == r.to_json()
    assert back.accuracy == r.accuracy and back.weighted_accuracy == r.weighted_accuracy
    out = r.write(tmp_path / "o")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["accuracy"] == r.accuracy and summary["config_hash"] == config_hash(r.config)
    header = (out / "rows.csv").read_text().splitlines()[0]
    assert header == "name,weight,truth,decision,score_fwd,score_bwd,error"


def test_rerun_reproduces_rows(tiny_suite):
    a = run_benchmark(tiny_suite, "ml", FAST, None, base_seed=3)
    b = run_benchmark(tiny_suite, "ml", FAST, None, base_seed=3)
    assert a.rows_csv() == b.rows_csv()
    c = run_benchmark(tiny_suite, "ml", FAST, None, base_seed=3, jobs=2)
    assert c.rows_csv() == a.rows_csv()


def test_failures_are_recorded(tiny_suite):
    bad = FlowConfig(epochs=400, learning_rate=50.0, s_clip=700.0, n_subflows=1, hidden_width=2)
    rng = np.random.default_rng(0)
    huge = PairDataset(rng.normal(size=100) * 1e3, rng.normal(size=100) * 1e3, truth="forward", name="big")
    r = run_benchmark(BenchmarkSuite("x", [huge]), "it", bad, None, 0)
    o = r.outcomes[0]
    assert not o.correct and o.error


def test_timeout_marks_failure(tiny_suite):
    slow = FlowConfig(epochs=100_000, hidden_width=2, n_subflows=1)
    r = run_benchmark(BenchmarkSuite("x", tiny_suite.datasets[:1]), "it", slow, None, 0, timeout=0.5)
    o = r.outcomes[0]
    assert "DatasetTimeout" in o.error and o.decision == "no_conclusion"


def test_results_dir_layout(tmp_path):
    snap = {"method": "it", "epochs": 1}
    p = results_dir(tmp_path, "SIM", "it", snap)
    assert p.parent == tmp_path / "sim" / "it" and len(p.name) == 12


def test_load_suite_dispatch(tuebingen_dir, sim_dir):
    assert load_suite("tuebingen", tuebingen_dir).name == "tuebingen"
    assert load_suite("sim-g", sim_dir).name == "SIM-G"
    with pytest.raises(ValueError):
        load_suite("sim")
