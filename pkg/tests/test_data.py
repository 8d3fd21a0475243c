import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetembed.data import (
    ATC_CLASSES,
    DataError,
    DimensionMismatchError,
    DomainSpec,
    FeatureFileNotFound,
    MissingDomainError,
    NonFiniteValueError,
    NonNumericCellError,
    RaggedRowError,
    Standardizer,
    assemble_dataset,
    compound_of,
    load_domain_csv,
    load_labels_csv,
    load_score_csv,
    split,
    split_checksum,
    synth_generate,
    synth_generate_with_truth,
    write_dataset,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------- CSV load


def test_three_rows_dim_two(tmp_path):
    p = write(tmp_path / "a.csv", "id,f0,f1\nx,1,2\ny,3,4\nz,5,6\n")
    got = load_domain_csv(p, DomainSpec(0, "a", 2))
    assert list(got) == ["x", "y", "z"]
    assert all(v.shape == (2,) for v in got.values())
    np.testing.assert_array_equal(got["y"], [3.0, 4.0])


def test_eighty_feature_header_accepted(tmp_path):
    header = "id," + ",".join(f"p{i}" for i in range(80))
    row = "drug1," + ",".join(str(i * 0.5) for i in range(80))
    got = load_domain_csv(write(tmp_path / "phys.csv", f"{header}\n{row}\n"), DomainSpec(0, "physchem", 80))
    assert got["drug1"].shape == (80,)


def test_nan_cell_names_row_and_column(tmp_path):
    p = write(tmp_path / "a.csv", "id,f0,f1\nx,1,2\ny,NaN,4\n")
    with pytest.raises(NonFiniteValueError) as info:
        load_domain_csv(p, DomainSpec(0, "a", 2))
    assert "row 3" in str(info.value) and "column 1" in str(info.value)


@pytest.mark.parametrize(
    "text, error",
    [
        ("id,f0,f1\nx,1,2\ny,3\n", RaggedRowError),
        ("id,f0,f1,f2\nx,1,2,3\n", DimensionMismatchError),
        ("id,f0,f1\nx,1,abc\n", NonNumericCellError),
        ("id,f0,f1\nx,1,inf\n", NonFiniteValueError),
        ("", DataError),
    ],
)
def test_malformed_files_raise_distinct_errors(tmp_path, text, error):
    with pytest.raises(error):
        load_domain_csv(write(tmp_path / "a.csv", text), DomainSpec(0, "a", 2))


def test_missing_file(tmp_path):
    with pytest.raises(FeatureFileNotFound):
        load_domain_csv(tmp_path / "nope.csv", DomainSpec(0, "a", 2))
    with pytest.raises(FileNotFoundError):
        load_domain_csv(tmp_path / "nope.csv", DomainSpec(0, "a", 2))


def test_labels_must_be_binary_and_named(tmp_path):
    names = ("A", "B")
    ok = load_labels_csv(write(tmp_path / "y.csv", "id,A,B\nx,1,0\n"), names)
    assert ok["x"].tolist() == [1, 0]
    with pytest.raises(DataError):
        load_labels_csv(write(tmp_path / "y2.csv", "id,A,B\nx,2,0\n"), names)
    with pytest.raises(DimensionMismatchError):
        load_labels_csv(write(tmp_path / "y3.csv", "id,A,C\nx,1,0\n"), names)


def test_score_csv(tmp_path):
    names, rows = load_score_csv(write(tmp_path / "s.csv", "id,A,B\nx,0.2,-1.5\n"))
    assert names == ("A", "B") and rows["x"].tolist() == [0.2, -1.5]


# ---------------------------------------------------------------- assemble

SPECS = [DomainSpec(0, "expr", 2), DomainSpec(1, "fp", 3)]


def test_compound_of():
    assert compound_of("A:3") == "A"
    assert compound_of("A") == "A"
    assert compound_of("A:x") == "A:x"


def test_replicate_copies_fingerprint():
    expr = {"A:0": np.array([1.0, 2.0]), "A:1": np.array([3.0, 4.0])}
    fp = {"A": np.array([1.0, 0.0, 1.0])}
    labels = {"A": np.eye(14, dtype=np.int8)[0]}
    ds = assemble_dataset([expr, fp], SPECS, labels, replicate_on=0)
    assert ds.m == 2
    assert [r.compound for r in ds.records] == ["A", "A"]
    np.testing.assert_array_equal(ds.records[0].features[1], ds.records[1].features[1])
    assert all(r.label[0] == 1 for r in ds.records)


def test_empty_intersection_is_an_empty_dataset():
    ds = assemble_dataset([{"A": np.zeros(2)}, {"B": np.zeros(3)}], SPECS)
    assert ds.m == 0 and len(ds.specs) == 2


def test_missing_domain_lists_ids():
    expr = {"A": np.zeros(2), "B": np.zeros(2)}
    fp = {"B": np.zeros(3)}
    with pytest.raises(MissingDomainError, match="A"):
        assemble_dataset([expr, fp], SPECS)


def test_impute_fills_with_domain_mean():
    expr = {"A": np.zeros(2), "B": np.ones(2)}
    fp = {"B": np.array([1.0, 2.0, 3.0])}
    ds = assemble_dataset([expr, fp], SPECS, impute=True)
    a = next(r for r in ds.records if r.id == "A")
    np.testing.assert_array_equal(a.features[1], [1.0, 2.0, 3.0])


def test_missing_label_is_an_error():
    with pytest.raises(MissingDomainError, match="label"):
        assemble_dataset([{"A": np.zeros(2)}, {"A": np.zeros(3)}], SPECS, labels={})


def test_wrong_vector_length():
    with pytest.raises(DimensionMismatchError):
        assemble_dataset([{"A": np.zeros(5)}, {"A": np.zeros(3)}], SPECS)


# -------------------------------------------------------------------- split


def tiny(m, replicas=1):
    recs = {}
    for i in range(m):
        for r in range(replicas):
            recs[f"c{i}:{r}" if replicas > 1 else f"c{i}"] = np.full(2, float(i))
    fp = {f"c{i}": np.zeros(3) for i in range(m)}
    return assemble_dataset([recs, fp], SPECS, replicate_on=0 if replicas > 1 else None)


def test_split_sizes_and_reproducibility():
    ds = tiny(10)
    a = split(ds, (0.8, 0.1, 0.1), seed=3)
    b = split(ds, (0.8, 0.1, 0.1), seed=3)
    assert [p.m for p in a] == [8, 1, 1]
    assert [p.ids() for p in a] == [p.ids() for p in b]
    assert split_checksum(*a) == split_checksum(*b)
    c = split(ds, (0.8, 0.1, 0.1), seed=4)
    assert split_checksum(*a) != split_checksum(*c) or [p.ids() for p in a] == [p.ids() for p in c]


def test_split_keeps_compound_replicates_together():
    ds = tiny(12, replicas=4)
    for seed in range(5):
        parts = split(ds, (0.6, 0.2, 0.2), seed=seed, group_by_compound=True)
        owner = {}
        for k, p in enumerate(parts):
            for r in p.records:
                assert owner.setdefault(r.compound, k) == k


@given(m=st.integers(3, 60), seed=st.integers(0, 2**16))
def test_split_is_a_partition(m, seed):
    ds = tiny(m)
    parts = split(ds, (0.7, 0.2, 0.1), seed=seed)
    ids = sorted(i for p in parts for i in p.ids())
    assert ids == sorted(ds.ids())
    assert all(p.m >= 1 for p in parts)


def test_split_errors():
    with pytest.raises(ValueError):
        split(tiny(10), (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(ValueError):
        split(tiny(2), (0.8, 0.1, 0.1), seed=0)


# ------------------------------------------------------------ standardizer


def test_standardizer_uses_train_statistics(rng):
    ds = synth_generate(k=2, dims=(30, 40), m=50, seed=1)
    tr, va, _ = split(ds, (0.6, 0.2, 0.2), seed=0)
    st_ = Standardizer.fit(tr)
    z = st_.apply(tr)
    np.testing.assert_allclose(z.features(0).mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.features(0).std(axis=0), 1.0, atol=1e-12)
    v = st_.apply(va)
    np.testing.assert_allclose(v.features(1), (va.features(1) - st_.means[1]) / st_.stds[1])


def test_standardizer_constant_feature():
    ds = assemble_dataset([{"a": np.array([1.0, 5.0]), "b": np.array([1.0, 7.0])}, {"a": np.zeros(3), "b": np.zeros(3)}], SPECS)
    st_ = Standardizer.fit(ds)
    assert st_.stds[0][0] == 1.0
    assert np.all(np.isfinite(st_.apply(ds).features(0)))


# ---------------------------------------------------------------- synthetic


def test_synth_is_deterministic():
    a = synth_generate(m=80, seed=7)
    b = synth_generate(m=80, seed=7)
    for s in a.specs:
        assert a.features(s.id).tobytes() == b.features(s.id).tobytes()
    assert a.labels().tobytes() == b.labels().tobytes()
    assert synth_generate(m=80, seed=8).features(0).tobytes() != a.features(0).tobytes()


def test_synth_one_to_three_labels():
    ds = synth_generate(q=14, m=100, seed=0)
    counts = ds.labels().sum(axis=1)
    assert counts.min() >= 1 and counts.max() <= 3
    assert ds.label_names == ATC_CLASSES


def test_synth_shapes_and_names():
    ds = synth_generate(k=2, dims=(30, 50), q=5, m=20, seed=0)
    assert [s.dim for s in ds.specs] == [30, 50]
    assert ds.q == 5 and ds.label_names == ("L0", "L1", "L2", "L3", "L4")
    assert ds.features(1).shape == (20, 50)


def test_synth_every_label_occurs_at_benchmark_size():
    ds = synth_generate(m=600, seed=3)
    assert ds.labels().sum(axis=0).min() > 0


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        synth_generate(k=2, dims=(10,))
    with pytest.raises(ValueError):
        synth_generate(dependency=1.5)


def _residuals(dependency, seed, signature=1.0):
    ds, truth = synth_generate_with_truth(
        k=2, dims=(48, 64), m=500, dependency=dependency, seed=seed, signature=signature
    )
    return [ds.features(j) - truth.conditional_mean[j] for j in range(2)]


def test_independent_domains_have_uncorrelated_residuals():
    # x_j - E[x_j | z] for the two domains; any fixed projection must be uncorrelated
    for seed in range(3):
        r0, r1 = _residuals(0.0, seed)
        rho = np.corrcoef(r0.mean(axis=1), r1.mean(axis=1))[0, 1]
        assert abs(rho) < 0.1


def _top_canonical_correlation(r0, r1, components=4):
    bases = []
    for r in (r0, r1):
        u, _, _ = np.linalg.svd(r - r.mean(axis=0), full_matrices=False)
        bases.append(u[:, :components])
    return np.linalg.svd(bases[0].T @ bases[1], compute_uv=False)[0]


def test_dependency_couples_residuals():
    # without the signature, whose independent per-record phase would dominate the top components
    for seed in range(3):
        low = _top_canonical_correlation(*_residuals(0.0, seed, signature=0.0))
        high = _top_canonical_correlation(*_residuals(0.8, seed, signature=0.0))
        assert high > low + 0.1


def test_write_dataset_round_trip(tmp_path):
    ds = synth_generate(k=2, dims=(30, 40), q=4, m=12, seed=0)
    files = write_dataset(ds, tmp_path)
    back = [load_domain_csv(files[s.name], s) for s in ds.specs]
    labels = load_labels_csv(files["labels"], ds.label_names)
    again = assemble_dataset(back, ds.specs, labels, label_names=ds.label_names)
    for s in ds.specs:
        assert again.features(s.id).tobytes() == ds.features(s.id).tobytes()
    np.testing.assert_array_equal(again.labels(), ds.labels())
