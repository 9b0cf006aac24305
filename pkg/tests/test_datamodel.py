import json

import numpy as np
import pytest
from conftest import make_index, make_sample

from ifdreid.datamodel import (
    DEFAULT_LABELS,
    DatasetIndex,
    RegionVocabulary,
    SplitRule,
    load_dataset,
    load_vocabulary,
    read_manifest,
    save_sample_files,
    save_vocabulary,
    split_query_gallery,
    write_manifest,
)
from ifdreid.errors import LoadError, ProtocolError, ValidationError


def test_default_vocabulary_codes(vocab):
    assert dict(vocab.labels) == dict(DEFAULT_LABELS)
    assert vocab.clothing_set == frozenset({3, 4, 5})


@pytest.mark.parametrize(
    "clothing",
    [[], list(DEFAULT_LABELS), ["hair", "pants"], ["face"]],
)
def test_vocabulary_rejects_bad_clothing_sets(clothing):
    with pytest.raises(ValidationError):
        RegionVocabulary.from_names(DEFAULT_LABELS, clothing)


def test_vocabulary_unknown_name():
    with pytest.raises(ValidationError, match="hat"):
        RegionVocabulary.from_names(DEFAULT_LABELS, ["hat"])


def test_vocabulary_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.json"
    save_vocabulary(vocab, path)
    assert load_vocabulary(path) == vocab
    yml = tmp_path / "v.yaml"
    yml.write_text("labels: {background: 0, hair: 1, coat: 2}\nclothing: [coat]\n")
    v = load_vocabulary(yml)
    assert v.clothing_set == frozenset({2})


def test_sample_validation():
    with pytest.raises(ValidationError):
        make_sample(identity=-1)
    img = np.zeros((4, 4, 3))
    with pytest.raises(ValidationError, match="sizes differ"):
        from ifdreid.datamodel import Sample

        Sample(img, np.zeros((4, 5), dtype=int), 0, 0, 0)


def test_index_buckets_partition():
    index = make_index({(0, 0): 3, (0, 1): 2, (1, 0): 4})
    assert index.by_identity == {0: (0, 1, 2, 3, 4), 1: (5, 6, 7, 8)}
    assert index.by_appearance[(0, 1)] == (3, 4)
    for pid, positions in index.by_identity.items():
        union = sorted(p for a in index.appearances_of(pid) for p in index.by_appearance[a])
        assert union == list(positions)
    # global appearance ids separate (0,0) from (1,0)
    apps = index.appearance_ids()
    assert len(set(apps[[0, 5]])) == 2
    labels, ids = index.identity_labels()
    assert ids == [0, 1] and labels.tolist() == [0] * 5 + [1] * 4


def _write_dataset(root, index):
    for k, s in enumerate(index):
        save_sample_files(root, f"img/{k}.png", f"par/{k}.png", s.image, s.parsing)
    rows = [
        type(s)(s.image, s.parsing, s.identity, s.clothing, s.camera, f"img/{k}.png", f"par/{k}.png")
        for k, s in enumerate(index)
    ]
    write_manifest(rows, root / "m.tsv", header="test set")
    return root / "m.tsv"


def test_manifest_round_trip(tmp_path):
    index = make_index({(0, 0): 2, (0, 1): 1, (3, 2): 2})
    manifest = _write_dataset(tmp_path, index)
    loaded = load_dataset(tmp_path, manifest)
    assert [(s.identity, s.clothing, s.camera) for s in loaded] == [(s.identity, s.clothing, s.camera) for s in index]
    # 8-bit storage quantises pixels; parsing codes survive exactly
    for a, b in zip(loaded, index):
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
        assert np.array_equal(a.parsing, b.parsing)


def test_empty_and_singleton_manifests(tmp_path):
    (tmp_path / "empty.tsv").write_text("# nothing\n")
    empty = load_dataset(tmp_path, tmp_path / "empty.tsv")
    assert len(empty) == 0 and empty.by_identity == {} and empty.by_appearance == {}
    one = make_index({(0, 0): 1})
    loaded = load_dataset(tmp_path, _write_dataset(tmp_path, one))
    assert loaded.by_identity == {0: (0,)}


def test_missing_file_names_row(tmp_path):
    (tmp_path / "m.tsv").write_text("# header\nimg/a.png\tpar/a.png\t0\t0\t0\n")
    with pytest.raises(LoadError, match=r"m\.tsv:2: missing file .*a\.png"):
        load_dataset(tmp_path, tmp_path / "m.tsv")


def test_bad_label_rejected(tmp_path):
    (tmp_path / "m.tsv").write_text("img/a.png\tpar/a.png\t-1\t0\t0\n")
    with pytest.raises((LoadError, ValidationError)):
        read_manifest(tmp_path / "m.tsv")


def test_size_mismatch_is_validation_error(tmp_path):
    s = make_sample(size=(8, 4))
    save_sample_files(tmp_path, "img/0.png", "par/0.png", s.image, s.parsing)
    other = make_sample(size=(6, 4))
    save_sample_files(tmp_path, "img/1.png", "par/1.png", other.image, other.parsing)
    (tmp_path / "m.tsv").write_text("img/0.png\tpar/1.png\t0\t0\t0\n")
    with pytest.raises(ValidationError):
        load_dataset(tmp_path, tmp_path / "m.tsv")


def test_synthetic_manifest_counts(tmp_path):
    from ifdreid.synthdata import SynthConfig, generate

    manifest = generate(SynthConfig(num_identities=4, clothings_per_identity=3, images_per_appearance=5), tmp_path)
    index = load_dataset(tmp_path, manifest)
    assert sorted(len(v) for v in index.by_identity.values()) == [15] * 4
    assert sorted(len(v) for v in index.by_appearance.values()) == [5] * 12


def test_split_by_camera():
    index = make_index({(0, 0): 2, (0, 1): 2, (1, 0): 1, (1, 1): 1})
    q, g = split_query_gallery(index, SplitRule("by-camera", (0,)))
    assert all(s.camera == 0 for s in q) and all(s.camera != 0 for s in g)
    assert len(q) + len(g) == len(index)


def test_split_empty_index():
    q, g = split_query_gallery(DatasetIndex(()), SplitRule())
    assert len(q) == 0 and len(g) == 0


def test_split_appearance_holdout_counts():
    spec = {(pid, cl): 3 + cl for pid in range(4) for cl in range(3)}
    index = make_index(spec)
    q, g = split_query_gallery(index, SplitRule("appearance-holdout", seed=5))
    q_apps = {s.appearance for s in q}
    assert len(q_apps) == 4 and {a[0] for a in q_apps} == {0, 1, 2, 3}
    assert len(q) == sum(spec[a] for a in q_apps)
    assert len(g) == len(index) - len(q)
    again = split_query_gallery(index, SplitRule("appearance-holdout", seed=5))[0]
    assert [s.appearance for s in again] == [s.appearance for s in q]


def test_split_missing_gallery_identity():
    index = make_index({(0, 0): 2, (1, 1): 2})
    with pytest.raises(ProtocolError):
        split_query_gallery(index, SplitRule("by-camera", (1,)))
