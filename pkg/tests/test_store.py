import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from monorank.errors import FormatError, ModelNotFoundError, OutOfRangeError
from monorank.store import (
    IORecorder,
    ModelSpec,
    gen_synthetic_model,
    load_all_layers,
    load_head,
    load_layer,
    read_embedding_rows,
    read_manifest,
    read_position_table,
)

from .conftest import TINY


def _copy(src, dst):
    dst.mkdir()
    for p in Path(src).iterdir():
        (dst / p.name).write_bytes(p.read_bytes())
    return dst


def test_default_spec_round_trip(tmp_path):
    d = gen_synthetic_model(ModelSpec(), 42, tmp_path)
    m = read_manifest(d)
    assert (m.n_layers, m.d_model, m.arch, m.score_position) == (12, 64, "decoder_only", "last")


def test_same_seed_byte_identical(tmp_path):
    a = gen_synthetic_model(TINY, 3, tmp_path / "a")
    b = gen_synthetic_model(TINY, 3, tmp_path / "b")
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors


def test_different_seeds_differ(tmp_path):
    a = gen_synthetic_model(TINY, 3, tmp_path / "a")
    b = gen_synthetic_model(TINY, 4, tmp_path / "b")
    assert (a / "layer_0.bin").read_bytes() != (b / "layer_0.bin").read_bytes()


def test_generated_ranges(tiny_model):
    w = load_layer(tiny_model, 0)
    assert np.abs(w.attn_q).max() <= 0.05
    assert np.abs(w.norm_attn - 1).max() <= 0.05
    head = load_head(tiny_model)
    assert head.weight.shape == (TINY.d_model,)


def test_layers_round_trip_against_raw_file(tiny_model):
    m = read_manifest(tiny_model)
    for i, w in enumerate(load_all_layers(tiny_model)):
        raw = np.fromfile(Path(tiny_model) / f"layer_{i}.bin", dtype="<f4")
        flat = np.concatenate([getattr(w, n).ravel() for n, _ in m.layer_shapes()])
        assert np.array_equal(raw.view(np.uint32), flat.view(np.uint32))
        assert w.layer_index == i


def test_load_layer_twice_bitwise(tiny_model):
    assert load_layer(tiny_model, 3).equals(load_layer(tiny_model, 3))


def test_load_layer_touches_one_file(tiny_model, model_factory):
    m = read_manifest(tiny_model)
    rec = IORecorder()
    load_layer(tiny_model, 2, recorder=rec)
    assert rec.files() == ["layer_2.bin"]
    assert rec.bytes_read() == m.layer_nbytes == m.files["layer_2.bin"]
    deeper = model_factory(ModelSpec(**{**TINY.__dict__, "n_layers": 9}), 1)
    rec2 = IORecorder()
    load_layer(deeper, 2, recorder=rec2)
    assert rec2.bytes_read() == rec.bytes_read()


def test_load_layer_out_of_range(tiny_model):
    with pytest.raises(OutOfRangeError):
        load_layer(tiny_model, TINY.n_layers)
    with pytest.raises(OutOfRangeError):
        load_layer(tiny_model, -1)


def test_layer_views_are_read_only(tiny_model):
    w = load_layer(tiny_model, 0)
    with pytest.raises(ValueError):
        w.attn_q[0, 0] = 1.0


def test_missing_model_dir(tmp_path):
    with pytest.raises(ModelNotFoundError):
        read_manifest(tmp_path / "absent")


def _edit_manifest(d, **changes):
    path = d / "manifest.json"
    doc = json.loads(path.read_text())
    doc.update(changes)
    path.write_text(json.dumps(doc))


@pytest.mark.parametrize(
    "changes, field",
    [
        ({"n_layers": 0}, "n_layers"),
        ({"vocab_size": 0}, "vocab_size"),
        ({"n_heads": 3}, "n_heads"),
        ({"arch": "seq2seq"}, "arch"),
        ({"rms_eps": 0}, "rms_eps"),
        ({"block": "postnorm"}, "block"),
        ({"extra": 1}, "extra"),
    ],
)
def test_manifest_invariants(tiny_model, tmp_path, changes, field):
    d = _copy(tiny_model, tmp_path / "m")
    _edit_manifest(d, **changes)
    with pytest.raises(FormatError) as info:
        read_manifest(d)
    assert info.value.field == field


def test_missing_field(tiny_model, tmp_path):
    d = _copy(tiny_model, tmp_path / "m")
    doc = json.loads((d / "manifest.json").read_text())
    del doc["d_ff"]
    (d / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="d_ff"):
        read_manifest(d)


def test_truncated_layer_file(tiny_model, tmp_path):
    d = _copy(tiny_model, tmp_path / "m")
    p = d / "layer_1.bin"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError, match="byte-length mismatch"):
        read_manifest(d)


def test_embedding_rows(tiny_model):
    m = read_manifest(tiny_model)
    table = np.fromfile(Path(tiny_model) / "embedding.bin", dtype="<f4").reshape(-1, m.d_model)
    assert read_embedding_rows(tiny_model, []).shape == (0, m.d_model)
    twice = read_embedding_rows(tiny_model, [5, 5])
    assert np.array_equal(twice[0], twice[1])
    for k in (0, 1, 77, m.vocab_size - 1):
        assert np.array_equal(read_embedding_rows(tiny_model, [k])[0], table[k])
    ids = [9, 3, 4, 5, 9, 100]
    assert np.array_equal(read_embedding_rows(tiny_model, ids), table[ids])


def test_embedding_reads_are_bounded(tiny_model):
    m = read_manifest(tiny_model)
    rec = IORecorder()
    ids = [7, 8, 9, 50, 7, 51]
    read_embedding_rows(tiny_model, ids, m, rec)
    assert rec.bytes_read() == len(set(ids)) * m.row_nbytes
    # runs 7..9 and 50..51 are coalesced
    assert len(rec.events) == 2


def test_embedding_out_of_range(tiny_model):
    with pytest.raises(OutOfRangeError):
        read_embedding_rows(tiny_model, [0, TINY.vocab_size])
    with pytest.raises(OutOfRangeError):
        read_embedding_rows(tiny_model, [-1])


def test_position_table_follows_token_table(tiny_model):
    m = read_manifest(tiny_model)
    table = np.fromfile(Path(tiny_model) / "embedding.bin", dtype="<f4").reshape(-1, m.d_model)
    assert np.array_equal(read_position_table(tiny_model), table[m.vocab_size :])


def test_manifest_json_is_deterministic(tiny_model):
    m = read_manifest(tiny_model)
    assert m.to_json() == (Path(tiny_model) / "manifest.json").read_text()
