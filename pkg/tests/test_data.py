import numpy as np
import pytest

from hrhash.core import similarity
from hrhash.data import (
    PROTOCOLS,
    DatasetProtocol,
    Preprocess,
    build_split,
    filter_by_concepts,
    generate_synthetic,
    load_image,
    load_samples,
    load_split,
    read_manifest,
    save_split,
    top_concepts,
    write_manifest,
    write_synthetic,
)
from hrhash.errors import ConfigError, InvalidInputError, ProtocolError

# 12-sample tag fixture: tag 0 x5, tag 1 x4, tag 2 x4, tag 3 x1, one untagged image
NUS_TAGS = [{0}, {0, 2}, {1}, {2}, {2, 3}, {0, 1}, {2}, set(), {1}, {0}, {1}, {0}]
NUS_TOP2_RETAINED = [0, 1, 2, 5, 8, 9, 10, 11]  # enumerated by hand; tag 1 beats tag 2 on the tie


def cifar_labels(per_class=6000, classes=10):
    return [{c} for c in range(classes) for _ in range(per_class)]


def test_cifar_protocol_cardinalities():
    split = build_split(PROTOCOLS["cifar10"], cifar_labels(), seed=0)
    assert (len(split.train_ids), len(split.test_ids), len(split.val_ids)) == (5000, 1000, 1000)
    assert len(split.database_ids) == 53000
    labels = cifar_labels()
    for c in range(10):
        assert sum(1 for i in split.train_ids if c in labels[i]) == 500
        assert sum(1 for i in split.test_ids if c in labels[i]) == 100


def test_split_is_deterministic():
    labels = cifar_labels(800)
    a = build_split(PROTOCOLS["cifar10"], labels, seed=5)
    b = build_split(PROTOCOLS["cifar10"], labels, seed=5)
    c = build_split(PROTOCOLS["cifar10"], labels, seed=6)
    assert a == b and a != c


def test_short_class_is_named():
    labels = cifar_labels(700)[:-1]
    with pytest.raises(ProtocolError, match="class 9"):
        build_split(PROTOCOLS["cifar10"], labels, 0)


def test_nuswide_filtering_fixture():
    assert top_concepts(NUS_TAGS, 2) == [0, 1]
    assert filter_by_concepts(NUS_TAGS, [0, 1]) == NUS_TOP2_RETAINED
    proto = DatasetProtocol("toy", train=3, test=2, val=1, top_concepts=2)
    split = build_split(proto, NUS_TAGS, seed=0)
    used = sorted(split.train_ids + split.test_ids + split.val_ids + split.database_ids)
    assert used == NUS_TOP2_RETAINED
    assert split.metadata["retained_concepts"] == [0, 1]


def test_imagenet_keeps_recorded_classes():
    labels = [{c} for c in range(120) for _ in range(200)]
    split = build_split(PROTOCOLS["imagenet"], labels, seed=0)
    kept = split.metadata["retained_classes"]
    assert len(kept) == 100
    ids = split.train_ids + split.test_ids + split.val_ids + split.database_ids
    assert all(next(iter(labels[i])) in kept for i in ids)
    assert len(ids) == 100 * 200


def test_pool_protocol_and_empty_labels():
    labels = [{i % 7} for i in range(30)] + [set()] * 5
    proto = DatasetProtocol("toy", train=10, test=5, val=5)
    split = build_split(proto, labels, 1)
    assert len(split.database_ids) == 10
    assert not set(range(30, 35)) & set(split.database_ids)
    with pytest.raises(ProtocolError, match="pool"):
        build_split(DatasetProtocol("toy", 20, 10, 10), labels, 1)


def test_split_file_round_trip(tmp_path):
    split = build_split(PROTOCOLS["imagenet"], [{c} for c in range(100) for _ in range(181)], 3)
    save_split(split, tmp_path / "s.json")
    back = load_split(tmp_path / "s.json")
    assert back == split and back.metadata == split.metadata


def test_protocol_from_dict():
    assert DatasetProtocol.from_dict({"name": "cifar10"}) is PROTOCOLS["cifar10"]
    p = DatasetProtocol.from_dict({"name": "cifar10", "train": 10})
    assert p.train == 10 and p.per_class
    with pytest.raises(ConfigError):
        DatasetProtocol("x", -1, 0, 0)


def test_synthetic_balanced_and_deterministic():
    s = generate_synthetic(3, 100, 16, 0.05, seed=2)
    assert len(s) == 300 and [x.id for x in s] == list(range(300))
    assert [sum(c in x.labels for x in s) for c in range(3)] == [100, 100, 100]
    t = generate_synthetic(3, 100, 16, 0.05, seed=2)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(s, t))
    with pytest.raises(InvalidInputError):
        generate_synthetic(1, 10)


def test_noise_free_classes_are_constant():
    s = generate_synthetic(4, 5, 16, 0.0, seed=0)
    for c in range(4):
        imgs = [x.pixels for x in s if c in x.labels]
        assert all(np.array_equal(imgs[0], im) for im in imgs)
    assert not np.array_equal(s[0].pixels, s[5].pixels)


def test_nearest_centroid_separates_classes():
    # centroids from one seed, accuracy measured on an independent draw
    train = generate_synthetic(10, 50, 32, 0.05, seed=0)
    test = generate_synthetic(10, 50, 32, 0.05, seed=1)
    cents = np.stack([np.mean([x.pixels for x in train if c in x.labels], axis=0).ravel() for c in range(10)])
    X = np.stack([x.pixels.ravel() for x in test])
    pred = np.argmin(((X[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    truth = np.array([next(iter(x.labels)) for x in test])
    assert np.mean(pred == truth) >= 0.99


def test_multi_label_overlays():
    s = generate_synthetic(5, 40, 16, 0.05, seed=0, multi_label=True)
    sizes = {len(x.labels) for x in s}
    assert sizes <= {1, 2, 3} and len(sizes) > 1
    for a, b in [(s[0], s[50]), (s[3], s[199]), (s[10], s[11])]:
        assert similarity(a.labels, b.labels) == int(bool(a.labels & b.labels))


def test_manifest_round_trip(tmp_path):
    samples = generate_synthetic(2, 3, 8, 0.05, seed=0)
    write_synthetic(tmp_path / "png", samples)
    loaded = load_samples(tmp_path / "png" / "manifest.tsv")
    assert [x.labels for x in loaded] == [x.labels for x in samples]
    assert all(np.max(np.abs(a.pixels - b.pixels)) <= 0.5 / 255 + 1e-6 for a, b in zip(loaded, samples))
    write_synthetic(tmp_path / "npy", samples, fmt="npy")
    exact = load_samples(tmp_path / "npy" / "manifest.tsv", ids=[1, 4])
    assert [x.id for x in exact] == [1, 4]
    assert np.array_equal(exact[1].pixels, samples[4].pixels)


def test_manifest_format(tmp_path):
    write_manifest(tmp_path / "m.tsv", [("a.png", {3, 1}), ("b.png", [])])
    assert (tmp_path / "m.tsv").read_text() == "a.png\t1,3\nb.png\t\n"
    assert read_manifest(tmp_path / "m.tsv") == [
        (str(tmp_path / "a.png"), frozenset({1, 3})),
        (str(tmp_path / "b.png"), frozenset()),
    ]


def test_grayscale_image(tmp_path):
    np.save(tmp_path / "g.npy", np.zeros((4, 4), np.float32))
    assert load_image(tmp_path / "g.npy").shape == (1, 4, 4)


def test_preprocess_resizes_and_normalizes():
    s = generate_synthetic(2, 1, 16, 0.0, seed=0)
    p = Preprocess((32, 32), mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    x = p(s)
    assert x.shape == (2, 3, 32, 32)
    same = Preprocess((16, 16), mean=(0.5,) * 3, std=(0.25,) * 3)(s)
    assert np.allclose(same.numpy(), (np.stack([t.pixels for t in s]) - 0.5) / 0.25)
    assert Preprocess.from_dict(p.to_dict()) == p
