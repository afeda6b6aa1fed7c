import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fleasim.data import (
    Dataset,
    PartitionSpec,
    add_context_marker,
    gen_gaussian_mixture,
    load_csv,
    partition,
    read_manifest,
    write_csv,
    write_manifest,
)
from fleasim.errors import ParseError, PartitionError
from fleasim.local import LocalConfig, flea_local_train
from fleasim.data import ClientDataset
from fleasim.metrics import accuracy
from fleasim.nn import init_model


def test_zero_spread_rows_equal_class_mean():
    d = gen_gaussian_mixture(3, 4, 5, 0.0, seed=1, scale=2.0)
    for c in range(3):
        rows = d.inputs[d.labels == c]
        assert np.array_equal(rows, np.repeat(rows[:1], 5, axis=0))


def test_generator_is_deterministic():
    a = gen_gaussian_mixture(4, 6, 10, 1.0, seed=5)
    b = gen_gaussian_mixture(4, 6, 10, 1.0, seed=5)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


def test_low_dim_generator_uses_circle():
    d = gen_gaussian_mixture(6, 2, 1, 0.0, seed=0, scale=1.0)
    assert np.allclose(np.linalg.norm(d.inputs, axis=1), 1.0)


@pytest.mark.parametrize("args", [(1, 4, 5, 1.0), (3, 1, 5, 1.0), (3, 4, 0, 1.0), (3, 4, 5, -1.0)])
def test_generator_preconditions(args):
    with pytest.raises(ValueError):
        gen_gaussian_mixture(*args)


def test_two_separated_classes_train_to_full_accuracy():
    data = gen_gaussian_mixture(2, 4, 50, 0.05, seed=0, scale=10.0)
    model = init_model([4, 8, 2], 1, seed=0)
    client = ClientDataset(0, np.arange(len(data)))
    cfg = LocalConfig(epochs=20, lambda2=0.0, lr=0.01)
    res = flea_local_train(model, model, client, data, None, cfg, 1, seed=0)
    assert accuracy(res.params, data) == 1.0


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 3)


# -- partitioning ----------------------------------------------------------------

@pytest.fixture(scope="module")
def data6():
    return gen_gaussian_mixture(6, 8, 300, 1.0, seed=2)


def test_iid_single_client_owns_everything(data6):
    (only,) = partition(data6, PartitionSpec("iid", 1, seed=0))
    assert np.array_equal(only.indices, np.arange(len(data6)))


def test_iid_is_stratified(data6):
    clients = partition(data6, PartitionSpec("iid", 30, 40, seed=1))
    for c in clients:
        assert len(c) == 40
        counts = np.bincount(data6.labels[c.indices], minlength=6)
        assert counts.max() - counts.min() <= 1


def test_qua2_every_client_has_two_classes(data6):
    for c in partition(data6, PartitionSpec("qua", 60, 20, q=2, seed=3)):
        assert len(np.unique(data6.labels[c.indices])) == 2


def test_qua_classes_roughly_balanced(data6):
    clients = partition(data6, PartitionSpec("qua", 60, 20, q=2, seed=3))
    usage = np.zeros(6, dtype=int)
    for c in clients:
        usage[np.unique(data6.labels[c.indices])] += 1
    assert usage.max() - usage.min() <= 1


def test_qua_exhaustion_names_class():
    small = gen_gaussian_mixture(3, 4, 5, 1.0, seed=0)
    with pytest.raises(PartitionError, match="class \\d+ exhausted"):
        partition(small, PartitionSpec("qua", 5, 3, q=1, seed=0))


def _entropy(data, clients):
    ents = []
    for c in clients:
        p = np.bincount(data.labels[c.indices], minlength=data.num_classes) / len(c)
        p = p[p > 0]
        ents.append(-(p * np.log(p)).sum())
    return float(np.mean(ents))


def test_dirichlet_concentration_lowers_entropy():
    data = gen_gaussian_mixture(6, 4, 500, 1.0, seed=0)
    low, high = [], []
    for seed in range(5):
        low.append(_entropy(data, partition(data, PartitionSpec("dir", 50, 40, mu=0.1, seed=seed))))
        high.append(_entropy(data, partition(data, PartitionSpec("dir", 50, 40, mu=0.5, seed=seed))))
    assert np.mean(low) < np.mean(high)


@pytest.mark.parametrize("mode", ["iid", "dir"])
def test_scarcity_knob(data6, mode):
    clients = partition(data6, PartitionSpec(mode, 40, 30, mu=0.3, seed=4))
    assert abs(np.mean([len(c) for c in clients]) - 30) <= 3


@given(
    st.sampled_from(["iid", "qua", "dir"]),
    st.integers(1, 30),
    st.integers(1, 40),
    st.integers(0, 1000),
)
def test_partition_disjoint_and_nonempty(mode, k, size, seed):
    data = gen_gaussian_mixture(6, 3, 200, 1.0, seed=0)
    spec = PartitionSpec(mode, k, size, q=2, mu=0.3, seed=seed)
    try:
        clients = partition(data, spec)
    except PartitionError:
        return
    all_idx = np.concatenate([c.indices for c in clients])
    assert len(all_idx) == len(np.unique(all_idx))
    assert all(len(c) >= 1 for c in clients)
    assert all_idx.max() < len(data)
    again = partition(data, spec)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(clients, again))


@pytest.mark.parametrize(
    "spec",
    [
        PartitionSpec("qua", 5, 10, q=0),
        PartitionSpec("qua", 5, 10, q=7),
        PartitionSpec("dir", 5, 10, mu=0.0),
        PartitionSpec("iid", 100, 100),
        PartitionSpec("zipf", 5, 10),
    ],
)
def test_invalid_specs(data6, spec):
    with pytest.raises(PartitionError):
        partition(data6, spec)


def test_manifest_round_trip(tmp_path, data6):
    clients = partition(data6, PartitionSpec("dir", 10, 30, mu=0.5, seed=1))
    write_manifest(tmp_path / "p.json", clients)
    back = read_manifest(tmp_path / "p.json")
    assert [c.client_id for c in back] == list(range(10))
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(clients, back))


# -- CSV ---------------------------------------------------------------------------

def test_csv_three_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1.5,2,cat\n-3,0.25,dog\n4,5e-1,cat\n")
    d = load_csv(p, "y")
    assert np.array_equal(d.inputs, np.array([[1.5, 2.0], [-3.0, 0.25], [4.0, 0.5]]))
    assert d.labels.tolist() == [0, 1, 0] and d.num_classes == 2


def test_csv_numeric_labels_reindexed(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("y,a\n10,1\n3,2\n10,3\n")
    assert load_csv(p, "y").labels.tolist() == [1, 0, 1]


def test_csv_malformed_row_reports_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,0\n1,2\n")
    with pytest.raises(ParseError, match=":3:"):
        load_csv(p, "y")


def test_csv_non_numeric_feature(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,y\n1,2,0\n1,oops,1\n")
    with pytest.raises(ParseError, match=":3: non-numeric"):
        load_csv(p, "y")


def test_csv_empty_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        load_csv(p, "y")


def test_csv_round_trip(tmp_path):
    d = gen_gaussian_mixture(3, 5, 7, 1.0, seed=9)
    write_csv(d, tmp_path / "m.csv")
    back = load_csv(tmp_path / "m.csv", "label")
    assert np.array_equal(back.inputs, d.inputs) and np.array_equal(back.labels, d.labels)


# -- context marker ------------------------------------------------------------------

def test_marker_fraction_one_flags_all(data6):
    marked = add_context_marker(data6, [1.0, 1.0], 1.0, seed=0)
    assert marked.context_flags.all()


def test_zero_marker_keeps_inputs(data6):
    marked = add_context_marker(data6, [0.0, 0.0, 0.0], 0.3, seed=0)
    assert np.array_equal(marked.inputs, data6.inputs) and marked.context_flags.sum() == round(0.3 * len(data6))


def test_marker_half_of_1000_rows():
    d = gen_gaussian_mixture(2, 4, 500, 1.0, seed=0)
    marked = add_context_marker(d, [2.0], 0.5, seed=3, offset=3)
    assert marked.context_flags.sum() == 500
    delta = marked.inputs - d.inputs
    assert np.allclose(delta[:, 3], np.where(marked.context_flags, 2.0, 0.0), rtol=0, atol=1e-12)
    assert not delta[:, :3].any()


def test_marker_too_long(data6):
    with pytest.raises(ValueError):
        add_context_marker(data6, np.ones(9), 0.5)
