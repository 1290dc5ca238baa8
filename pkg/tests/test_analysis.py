import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fn2en.analysis import (ConfusionMatrix, compare_networks, confusion_matrix, entropy_report, evaluate,
                            format_les_table, kfold_mean, label_entropy, layer_entropies, les_count, neuron_entropy,
                            neuron_responses, parse_les_table, visualize_neuron)
from fn2en.errors import ConfigError, ContractError, DataError
from fn2en.nn import attach_head
from fn2en.toy import TOY_POLICY

from oracles import entropy_brute, les_brute, tally


def test_single_label_top_k_has_zero_entropy():
    r = np.arange(10.0)
    assert neuron_entropy(r, [2] * 10, k=5, n=4).entropy == 0.0


def test_uniform_over_eight_labels_is_ln_8():
    rec = neuron_entropy(np.arange(8.0), np.arange(8), k=8, n=8)
    assert rec.entropy == pytest.approx(math.log(8), abs=1e-12)
    assert round(rec.entropy, 4) == 2.0794


def test_half_and_half_is_ln_2():
    labels = np.array([0] * 50 + [1] * 50 + [2] * 20)
    responses = np.concatenate([np.ones(100), np.zeros(20)])
    rec = neuron_entropy(responses, labels, k=100, n=3)
    assert rec.entropy == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(rec.histogram, [0.5, 0.5, 0.0])


def test_ties_break_by_ascending_id():
    rec = neuron_entropy(np.ones(4), [0, 1, 2, 3], k=2, n=4, ids=[40, 10, 30, 20])
    assert list(rec.top_ids) == [10, 20]
    assert rec.dominant_label == 1


def test_large_k_is_clamped_with_warning():
    with pytest.warns(UserWarning, match="K=3"):
        rec = neuron_entropy([3.0, 2.0, 1.0], [0, 1, 1], k=100, n=2)
    assert len(rec.top_ids) == 3


def test_empty_dataset_is_a_data_error():
    with pytest.raises(DataError):
        neuron_entropy([], [], k=5, n=2)
    with pytest.raises(ConfigError):
        neuron_entropy([1.0], [0], k=0, n=2)


def test_hand_les_example():
    counts, threshold = les_count({"A": [0.1, 0.9], "B": [0.5, 0.7]})
    assert threshold == 0.5 and counts == {"A": 1, "B": 0}


def test_layer_all_above_threshold_counts_zero():
    counts, _ = les_count({"A": [0.2, 0.4], "B": [1.0, 1.2]})
    assert counts["B"] == 0


def test_empty_layer_is_excluded_with_warning():
    with pytest.warns(UserWarning, match="empty"):
        counts, _ = les_count({"A": [0.1, 0.3], "empty": []})
    assert counts == {"A": 1}
    with pytest.raises(ContractError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            les_count({"empty": []})


def _random_instance(rng):
    count = int(rng.integers(1, 80))
    n = int(rng.integers(1, 9))
    k = int(rng.integers(1, count + 1))
    # coarse integer responses make ties common
    responses = rng.integers(0, 6, size=count).astype(float) if rng.random() < 0.5 else rng.normal(size=count)
    ids = rng.permutation(count * 3)[:count]
    return responses, rng.integers(0, n, size=count), k, n, ids


def test_entropy_and_les_match_brute_force_on_1000_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        responses, labels, k, n, ids = _random_instance(rng)
        h, top = entropy_brute(responses, labels, k, n, ids)
        rec = neuron_entropy(responses, labels, k, n, ids=ids)
        assert rec.entropy == h and list(rec.top_ids) == top
        assert 0.0 <= rec.entropy <= math.log(n) + 1e-12
        layers = {f"L{j}": rng.uniform(0, 2, size=rng.integers(1, 12)) for j in range(rng.integers(1, 5))}
        assert les_count(layers) == les_brute(layers)


def test_vectorised_layer_matches_per_neuron_oracle(rng):
    responses = rng.integers(0, 4, size=(30, 7)).astype(float)
    labels = rng.integers(0, 5, size=30)
    ent, top, hist = layer_entropies(responses, labels, k=9, n=5)
    for j in range(7):
        h, ids = entropy_brute(responses[:, j], labels, 9, 5)
        assert ent[j] == h and list(top[j]) == ids
        assert hist[j].sum() == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=10).filter(any), st.randoms(use_true_random=False))
def test_entropy_bounds_and_bin_permutation_invariance(counts, rand):
    n = len(counts)
    h = label_entropy(counts)
    assert 0.0 <= h <= math.log(n) + 1e-12 if n > 1 else h == 0.0
    shuffled = list(counts)
    rand.shuffle(shuffled)
    assert label_entropy(shuffled) == pytest.approx(h, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=3), st.lists(st.floats(0, 3), min_size=1, max_size=8),
                       min_size=1, max_size=5), st.randoms(use_true_random=False))
def test_les_threshold_ignores_layer_order(layers, rand):
    items = list(layers.items())
    rand.shuffle(items)
    counts, threshold = les_count(layers)
    counts2, threshold2 = les_count(dict(items))
    assert threshold == threshold2 and counts == counts2
    assert all(counts[name] <= len(v) for name, v in layers.items())


def test_neuron_responses():
    a = np.arange(2 * 3 * 2 * 2.0).reshape(2, 3, 2, 2)
    np.testing.assert_array_equal(neuron_responses(a), a.max(axis=(2, 3)))
    np.testing.assert_array_equal(neuron_responses(np.ones((2, 5))), np.ones((2, 5)))
    with pytest.raises(ConfigError):
        neuron_responses(np.ones(3))


def test_visualize_k1_is_top_image(rng):
    imgs = rng.uniform(size=(5, 3, 4, 4)).astype(np.float32)
    mean, order = visualize_neuron(imgs, [0.1, 0.9, 0.3, 0.2, 0.5], k=1)
    np.testing.assert_array_equal(mean, imgs[1])
    assert list(order) == [1]


def test_visualize_identical_images(rng):
    img = rng.uniform(size=(1, 4, 4)).astype(np.float32)
    mean, _ = visualize_neuron(np.repeat(img[None], 4, axis=0), rng.normal(size=4), k=3)
    np.testing.assert_array_equal(mean, img)


def test_visualize_two_images_average():
    a, b, c = np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5), np.ones((1, 2, 2))
    mean, _ = visualize_neuron(np.stack([a, b, c]), [2.0, 0.0, 3.0], k=2)
    np.testing.assert_array_equal(mean, (a + c) / 2)
    with pytest.raises(ConfigError):
        visualize_neuron(np.stack([a, b]), [1.0, 0.0], k=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_visualize_stays_in_input_range(k, seed):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0.2, 0.7, size=(8, 1, 3, 3))
    mean, _ = visualize_neuron(imgs, rng.normal(size=8), k=k)
    assert imgs.min() <= mean.min() and mean.max() <= imgs.max()


def test_confusion_matches_tally_on_six_samples():
    truth = [0, 0, 1, 2, 2, 2]
    pred = [0, 1, 1, 2, 0, 2]
    cm = confusion_matrix(truth, pred, ["a", "b", "c"])
    assert cm.counts.tolist() == tally(zip(truth, pred), 3)
    assert cm.total == 6 and cm.accuracy == pytest.approx(4 / 6)
    np.testing.assert_allclose(cm.normalized().sum(axis=1), 1.0)
    assert cm.counts.sum(axis=1).tolist() == [2, 1, 3]


def test_perfect_predictor_is_diagonal():
    cm = confusion_matrix([0, 1, 2, 1], [0, 1, 2, 1], ["a", "b", "c"])
    assert cm.accuracy == 1.0 and not (cm.counts - np.diag(np.diag(cm.counts))).any()


def test_confusion_csv_round_trip_and_sum():
    cm = confusion_matrix([0, 1, 1], [1, 1, 0], ["x", "y"])
    back = ConfusionMatrix.from_csv(cm.to_csv())
    assert back.class_names == ["x", "y"] and back.counts.tolist() == cm.counts.tolist()
    assert (cm + cm).total == 6
    assert cm.to_csv().splitlines()[0] == "true\\pred,x,y"


def test_normalized_rows_with_missing_class():
    cm = confusion_matrix([0, 0], [0, 1], ["a", "b"])
    np.testing.assert_array_equal(cm.normalized(), [[0.5, 0.5], [0.0, 0.0]])


def test_kfold_mean_is_unweighted():
    assert kfold_mean([1.0, 0.5, 0.75]) == pytest.approx(0.75)
    with pytest.raises(DataError):
        kfold_mean([])


def test_report_and_table_round_trip(rng):
    labels = rng.integers(0, 3, size=40)
    a = entropy_report({"p1": rng.normal(size=(40, 6)), "p2": rng.normal(size=(40, 4))}, labels, k=10, n=3, tag="A")
    b = entropy_report({"p1": rng.normal(size=(40, 6)), "p2": rng.normal(size=(40, 4))}, labels, k=10, n=3, tag="B")
    layers, base, deltas = parse_les_table(format_les_table(a, b))
    assert layers == ["p1", "p2"] and base == a.les
    assert deltas == {name: b.les[name] - a.les[name] for name in layers}
    assert a.entropy_histograms["p1"].sum() == 6
    assert [r.index for r in a.records("p2")] == [0, 1, 2, 3]


def test_compare_same_network_has_zero_deltas(tiny):
    net = tiny.teacher.network
    imgs, labels = tiny.data.inputs(), tiny.data.labels
    cmp = compare_networks(net, net, imgs, labels, ["pool1", "pool2"], k=5, n=3, policy=tiny.policy)
    assert cmp.deltas == {"pool1": 0, "pool2": 0}
    np.testing.assert_array_equal(cmp.base.bin_edges, cmp.other.bin_edges)
    assert cmp.table().splitlines()[2] == "fine-tuned,+0,+0"


def test_compare_tap_mismatch(tiny):
    net = tiny.teacher.network
    with pytest.raises(ConfigError):
        compare_networks(net, tiny.student(), tiny.data.inputs(), tiny.data.labels, ["adapter"], k=5,
                         policy=tiny.policy)


def test_evaluate_contracts(tiny):
    net = attach_head(tiny.student(), tiny.spec)
    result = evaluate(net, tiny.data, policy=tiny.policy)
    assert result.confusion.total == len(tiny.data)
    assert result.accuracy == pytest.approx(np.trace(result.confusion.counts) / len(tiny.data))
    with pytest.raises(DataError):
        evaluate(net, tiny.data, indices=[], policy=tiny.policy)
    with pytest.raises(ContractError):
        evaluate(tiny.student(), tiny.data, policy=tiny.policy)


def test_toy_confusion_rows_sum_to_class_counts(toy_pipeline):
    p = toy_pipeline
    result = evaluate(p.net, p.data, p.test, TOY_POLICY)
    expected = np.bincount(p.data.labels[p.test], minlength=p.data.num_classes)
    assert result.confusion.counts.sum(axis=1).tolist() == expected.tolist()
    assert result.accuracy == p.stage2.history[-1]["accuracy"]


def test_finetuning_adds_low_entropy_neurons_late(toy_pipeline):
    p = toy_pipeline
    tt = p.toy_teacher
    cmp = compare_networks(tt.pretrained, tt.finetuned, p.data.inputs(), p.data.labels, ["pool1", "pool2", "pool3"],
                           k=40, policy=TOY_POLICY)
    assert cmp.deltas["pool3"] > 0
