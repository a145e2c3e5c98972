import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcap.errors import DatasetCacheError, EmptyDatasetError, MalformedRecordError
from dcap.featurestore import (
    UNKNOWN,
    EncodedDataset,
    build_vocabulary,
    binarize_rating,
    load_cache,
    load_delimited,
    load_movielens,
    make_synthetic,
    minibatches,
    numeric_token,
    read_schema_file,
    save_cache,
    split_dataset,
    transform_numeric,
)


class TestVocabulary:
    def test_threshold(self):
        recs = [{"f": "a"}] * 5 + [{"f": "b"}]
        schema = build_vocabulary(recs, "f", min_frequency=2)
        assert schema.vocabulary == {"a": 0}
        assert schema.unknown_index == 1
        assert schema.encode("b") == 1
        assert schema.decode(1) == UNKNOWN

    def test_threshold_disabled(self):
        recs = [{"f": t} for t in "cabca"]
        schema = build_vocabulary(recs, "f", min_frequency=1)
        assert schema.vocabulary == {"a": 0, "b": 1, "c": 2}
        assert schema.size == 4

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            build_vocabulary([], "f")

    def test_numerical_field_is_bucketed(self):
        recs = [{"x": "20.1"}, {"x": "1.5"}, {"x": ""}]
        schema = build_vocabulary(recs, "x", kind="numerical")
        assert set(schema.vocabulary) == {"9", "1"}


class TestNumericTransform:
    def test_boundary(self):
        assert transform_numeric(2) == 2

    def test_e_cubed(self):
        assert transform_numeric(math.exp(3)) == 9

    def test_zero(self):
        assert transform_numeric(0) == 0

    def test_negative_clamped(self):
        assert transform_numeric(-3.5) == 0

    @pytest.mark.parametrize("raw", [None, "", "abc", "nan"])
    def test_missing_is_unknown(self, raw):
        assert numeric_token(raw) is None

    @settings(max_examples=100, deadline=None)
    @given(st.floats(2.0001, 1e12), st.floats(2.0001, 1e12))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert transform_numeric(lo) <= transform_numeric(hi)


class TestRating:
    @pytest.mark.parametrize("r,y", [(5, 1), (4, 1), (3, 0), (2, 0), (1, 0)])
    def test_binarize(self, r, y):
        assert binarize_rating(r) == y

    @pytest.mark.parametrize("r", [0, 6, -1])
    def test_out_of_range(self, r):
        with pytest.raises(MalformedRecordError):
            binarize_rating(r)


def _dataset(n, seed=0):
    return make_synthetic(n, seed=seed)


class TestSplit:
    def test_ten(self):
        s = split_dataset(_dataset(10), 0)
        assert (len(s.train), len(s.validation), len(s.test)) == (8, 1, 1)

    def test_movielens_count_arithmetic(self):
        n = 1_000_209
        n_train = (8 * n) // 10
        n_val = (n - n_train) // 2
        assert (n_train, n_val, n - n_train - n_val) == (800167, 100021, 100021)

    def test_movielens_count_on_indices(self):
        ids = np.zeros((1_000_209, 1), dtype=np.int64)
        data = EncodedDataset(ids, np.zeros(1_000_209, dtype=np.int8), _dataset(10).schemas[:1])
        s = split_dataset(data, 3)
        assert tuple(len(s.indices[k]) for k in ("train", "validation", "test")) == (800167, 100021, 100021)

    def test_same_seed_identical(self):
        d = _dataset(200)
        a, b = split_dataset(d, 5), split_dataset(d, 5)
        for k in a.indices:
            assert a.indices[k].tobytes() == b.indices[k].tobytes()

    def test_too_small(self):
        with pytest.raises(EmptyDatasetError):
            split_dataset(_dataset(9), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(10, 400), st.integers(0, 1000))
    def test_partition(self, n, seed):
        d = _dataset(n)
        s = split_dataset(d, seed)
        joined = np.concatenate([s.indices[k] for k in ("train", "validation", "test")])
        assert np.array_equal(np.sort(joined), np.arange(n))


class TestMinibatches:
    def test_sizes(self):
        assert [len(b) for b in minibatches(10, 4, 0, 1)] == [4, 4, 2]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 9), st.integers(1, 5))
    def test_cover_once(self, n, bs, seed, epoch):
        got = np.concatenate(list(minibatches(n, bs, seed, epoch)))
        assert np.array_equal(np.sort(got), np.arange(n))

    def test_epochs_differ(self):
        a = np.concatenate(list(minibatches(50, 8, 0, 1)))
        b = np.concatenate(list(minibatches(50, 8, 0, 2)))
        assert not np.array_equal(a, b)


@pytest.fixture
def movielens_dir(tmp_path):
    (tmp_path / "ratings.dat").write_text("1::10::5::978300760\n2::20::3::978300761\n1::20::1::978300762\n")
    (tmp_path / "users.dat").write_text("1::F::1::10::48067\n2::M::56::16::70072\n")
    (tmp_path / "movies.dat").write_text("10::Toy Story (1995)::Animation\n20::Jumanji (1995)::Adventure\n")
    return tmp_path


class TestMovieLens:
    def test_three_line_fixture(self, movielens_dir):
        d = movielens_dir
        data, report = load_movielens(d / "ratings.dat", d / "users.dat", d / "movies.dat")
        assert data.labels.tolist() == [1, 0, 0]
        assert data.field_names == ["UserID", "MovieID", "Gender", "Age", "Occupation"]
        assert report.stats_line().startswith("instances=3 fields=5")
        assert any("10072" in n for n in report.notes)

    def test_missing_users_file(self, movielens_dir):
        d = movielens_dir
        (d / "users.dat").unlink()
        with pytest.raises(FileNotFoundError, match="users.dat"):
            load_movielens(d / "ratings.dat", d / "users.dat", d / "movies.dat")

    def test_malformed_lines_skipped(self, movielens_dir):
        d = movielens_dir
        with open(d / "ratings.dat", "a") as fh:
            fh.write("garbage\n1::10::9::0\n")
        data, report = load_movielens(d / "ratings.dat", d / "users.dat", d / "movies.dat")
        assert len(data) == 3 and report.skipped == 2


class TestDelimited:
    def test_schema_and_missing_values(self, tmp_path):
        (tmp_path / "s.schema").write_text("label label\nI1 numerical\nC1 categorical\n")
        (tmp_path / "d.tsv").write_text("1\t20.1\ta\n0\t\tb\n1\t1\ta\n0\t3\t\n")
        data, report = load_delimited(tmp_path / "d.tsv", tmp_path / "s.schema", "\t", min_frequency=2)
        assert data.labels.tolist() == [1, 0, 1, 0]
        c1 = data.schemas[1]
        assert c1.vocabulary == {"a": 0}
        assert data.ids[:, 1].tolist() == [0, 1, 0, 1]  # b is rare, empty is missing
        assert report.fields == 2

    def test_bad_schema(self, tmp_path):
        (tmp_path / "s.schema").write_text("I1 numerical\n")
        with pytest.raises(MalformedRecordError):
            read_schema_file(tmp_path / "s.schema")

    def test_bundled_schemas(self):
        from importlib import resources

        criteo = read_schema_file(resources.files("dcap").joinpath("schemas", "criteo.schema"))
        avazu = read_schema_file(resources.files("dcap").joinpath("schemas", "avazu.schema"))
        assert sum(k == "numerical" for _, k in criteo) == 13
        assert sum(k == "categorical" for _, k in criteo) == 26
        assert sum(k == "categorical" for _, k in avazu) == 22


class TestCache:
    def test_round_trip(self, tmp_path):
        d = _dataset(300, seed=4)
        save_cache(d, tmp_path / "a.ds")
        back = load_cache(tmp_path / "a.ds")
        assert np.array_equal(back.ids, d.ids) and np.array_equal(back.labels, d.labels)
        assert [s.vocabulary for s in back.schemas] == [s.vocabulary for s in d.schemas]

    def test_idempotent_bytes(self, tmp_path):
        d = _dataset(100, seed=1)
        save_cache(d, tmp_path / "a.ds")
        save_cache(load_cache(tmp_path / "a.ds"), tmp_path / "b.ds")
        assert (tmp_path / "a.ds").read_bytes() == (tmp_path / "b.ds").read_bytes()

    def test_corruption_detected(self, tmp_path):
        save_cache(_dataset(50), tmp_path / "a.ds")
        raw = bytearray((tmp_path / "a.ds").read_bytes())
        raw[20] ^= 0xFF
        (tmp_path / "a.ds").write_bytes(bytes(raw))
        with pytest.raises(DatasetCacheError):
            load_cache(tmp_path / "a.ds")
