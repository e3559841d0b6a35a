import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantdg import data
from quantdg.tensor import ContractError


def _plugin_mi(a, b):
    mi = 0.0
    for i in np.unique(a):
        for j in np.unique(b):
            pij = np.mean((a == i) & (b == j))
            if pij > 0:
                mi += pij * np.log(pij / (np.mean(a == i) * np.mean(b == j)))
    return mi


def test_moons_same_angle_same_domain():
    ds = data.gen_rotated_moons(40, [0, 0, 30], seed=3)
    np.testing.assert_array_equal(ds.domains[0].x, ds.domains[1].x)


def test_moons_full_turn():
    ds = data.gen_rotated_moons(40, [0, 360, 30], seed=3)
    assert np.abs(ds.domains[0].x - ds.domains[1].x).max() <= 1e-12


def test_moons_class_balance_and_errors():
    ds = data.gen_rotated_moons(50, [0, 10, 20], seed=0)
    for d in ds.domains:
        assert np.sum(d.y == 0) == np.sum(d.y == 1) == 25
    with pytest.raises(ContractError):
        data.gen_rotated_moons(50, [0, 10])
    with pytest.raises(ContractError):
        data.gen_rotated_moons(50, [0, 10, 20], noise_sd=-1)


def test_blobs_zero_correlation_has_no_information():
    ds = data.gen_spurious_blobs(10_000, [0.0, 0.5, -0.5], seed=0)
    d = ds.domains[0]
    assert _plugin_mi(d.x[:, -1], d.y) < 0.01


def test_blobs_full_correlation_copies_label():
    ds = data.gen_spurious_blobs(100, [1.0, 0.5, -1.0], seed=0)
    np.testing.assert_array_equal(ds.domains[0].x[:, -1], ds.domains[0].y)
    np.testing.assert_array_equal(ds.domains[2].x[:, -1], 1 - ds.domains[2].y)


def test_blobs_agreement_rate_tracks_correlation():
    ds = data.gen_spurious_blobs(20_000, [0.8, 0.4, -0.6], seed=1)
    for d, c in zip(ds.domains, (0.8, 0.4, -0.6)):
        assert np.mean(d.x[:, -1] == d.y) == pytest.approx((1 + c) / 2, abs=0.01)


def test_blobs_seeds_and_errors():
    a = data.gen_spurious_blobs(50, [0.9, 0.8, -0.9], seed=0)
    b = data.gen_spurious_blobs(50, [0.9, 0.8, -0.9], seed=1)
    assert not np.array_equal(a.domains[0].x, b.domains[0].x)
    for bad in ([0.9, 1.5, -0.9], [0.9, 0.8, 0.9], [0.9, -0.9]):
        with pytest.raises(ContractError):
            data.gen_spurious_blobs(50, bad)


def test_generators_are_pure():
    a = data.default_benchmark(seed=4)
    b = data.default_benchmark(seed=4)
    for da, db in zip(a.domains, b.domains):
        assert da.x.tobytes() == db.x.tobytes() and da.y.tobytes() == db.y.tobytes()


def test_default_benchmark_shape():
    ds = data.default_benchmark()
    assert ds.input_dim == 9 and len(ds.domains) == 4
    assert all(len(d.y) == 500 for d in ds.domains)
    assert ds.names[-1].startswith("target")


def test_dataset_is_read_only(bench):
    with pytest.raises(ValueError):
        bench.domains[0].x[0, 0] = 1.0


def test_csv_fixture(tmp_path):
    p = tmp_path / "tiny.csv"
    p.write_text("domain,label,f0,f1\na,cat,1.0,2.0\nb,dog,3,4\na,dog,5,6\nb,cat,7,8\n")
    ds = data.ingest_csv(p)
    assert ds.names == ["a", "b"]
    assert [len(d.y) for d in ds.domains] == [2, 2]
    assert ds.label_names == ("cat", "dog")
    np.testing.assert_array_equal(ds.domain("b").y, [1, 0])
    np.testing.assert_array_equal(ds.domain("a").x, [[1, 2], [5, 6]])


def test_csv_round_trip(tmp_path, bench):
    p = tmp_path / "bench.csv"
    data.export_csv(bench, p)
    back = data.ingest_csv(p)
    assert back.names == bench.names
    for a, b in zip(bench.domains, back.domains):
        assert a.x.tobytes() == b.x.tobytes()
        np.testing.assert_array_equal(a.y, b.y)


@pytest.mark.parametrize(
    "bad_row, needle",
    [("b,1,oops,2", "non-numeric"), (",1,1,2", "empty domain"), ("b,1,1", "fields")],
)
def test_csv_malformed_row_seven(tmp_path, bad_row, needle):
    lines = ["domain,label,f0,f1"] + [f"a,{i % 2},{i},{i}" for i in range(5)] + [bad_row, "a,0,1,1"]
    p = tmp_path / "bad.csv"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(data.IngestionError, match=r"row 7\b") as exc:
        data.ingest_csv(p)
    assert needle in str(exc.value)


def test_csv_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("domain,f0\na,1\n")
    with pytest.raises(data.IngestionError, match="label"):
        data.ingest_csv(p)


def test_split_counts_and_disjointness():
    ds = data.gen_spurious_blobs(100, [0.9, 0.8, -0.9], seed=0)
    plan = data.split_leave_one_out(ds, ds.names[-1], seed=0)
    assert set(plan.train) == set(ds.names[:-1])
    for name in ds.names[:-1]:
        assert len(plan.train[name]) == 80 and len(plan.val[name]) == 20
        assert not set(plan.train[name]) & set(plan.val[name])


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 200), st.floats(0.05, 0.5), st.integers(0, 1000))
def test_split_is_stratified(n, frac, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    y[:3] = [0, 1, 2]
    ds = data.DomainDataset(
        domains=tuple(data.Domain(name, rng.normal(size=(n, 2)), y) for name in ("s0", "s1", "t")),
        num_classes=3,
        metadata={},
    )
    plan = data.split_leave_one_out(ds, "t", val_fraction=frac, seed=seed)
    for name in ("s0", "s1"):
        v = plan.val[name]
        assert not set(v) & set(plan.train[name])
        assert len(v) + len(plan.train[name]) == n
        for c in range(3):
            assert abs(np.sum(y[v] == c) - frac * np.sum(y == c)) <= 1


def test_split_seeds_differ_and_errors(bench):
    a = data.split_leave_one_out(bench, bench.names[-1], seed=0)
    b = data.split_leave_one_out(bench, bench.names[-1], seed=1)
    assert not np.array_equal(a.val[bench.names[0]], b.val[bench.names[0]])
    with pytest.raises(ContractError):
        data.split_leave_one_out(bench, "nope")
    tiny = data.gen_spurious_blobs(4, [0.9, 0.8, -0.9])
    with pytest.raises(ContractError):
        data.split_leave_one_out(tiny, tiny.names[-1])


def test_views_hide_target(bench):
    plan = data.split_leave_one_out(bench, bench.names[-1], seed=0)
    view, target = data.make_views(bench, plan)
    assert bench.names[-1] not in view.domain_names
    assert len(target) == 500
    assert target.score(lambda x, y: float(np.mean(y))) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        target.score(lambda x, y: y)
