import numpy as np
import pytest

from jpave.Constants import FORMAT_MAGIC
from jpave.Exceptions import CheckpointError
from jpave.Storage import load_embeddings
from jpave.Storage import overwrite_rows
from jpave.Storage import read_container
from jpave.Storage import save_embeddings
from jpave.Storage import write_container


def test_container_is_bit_exact(tmp_path, rng):
    arrays = [("a", rng.normal(size=(3, 4))), ("b", rng.normal(size=5)), ("c", np.array(1e-300))]
    path = tmp_path / "blob.bin"
    write_container(path, {"kind": "test", "epoch": 3}, arrays)
    header, loaded = read_container(path)
    assert header == {"kind": "test", "epoch": 3}
    for name, array in arrays:
        assert loaded[name].shape == array.shape
        assert loaded[name].tobytes() == array.tobytes()


def test_container_rejects_foreign_and_truncated_files(tmp_path):
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "missing.bin")

    foreign = tmp_path / "foreign.bin"
    foreign.write_bytes(b"not a container")
    with pytest.raises(CheckpointError, match="not a jpave container"):
        read_container(foreign)

    path = tmp_path / "full.bin"
    write_container(path, {}, [("w", np.ones(8))])
    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_container(truncated)

    garbled = tmp_path / "garbled.bin"
    garbled.write_bytes(FORMAT_MAGIC + b"\x04\x00\x00\x00\x00\x00\x00\x00{{{{")
    with pytest.raises(CheckpointError, match="corrupt header"):
        read_container(garbled)


def test_embeddings_round_trip(tmp_path, rng):
    matrix = rng.normal(size=(3, 2))
    path = tmp_path / "emb.bin"
    save_embeddings(path, ["red", "silk", "color [SEP] red"], matrix)
    tokens, loaded = load_embeddings(path)
    assert tokens == ["red", "silk", "color [SEP] red"]
    assert np.array_equal(loaded, matrix)

    with pytest.raises(CheckpointError):
        save_embeddings(path, ["only-one"], matrix)

    other = tmp_path / "other.bin"
    write_container(other, {"kind": "checkpoint"}, [])
    with pytest.raises(CheckpointError, match="not an embedding file"):
        load_embeddings(other)


def test_overwrite_rows_matches_keys(tmp_path):
    path = tmp_path / "emb.bin"
    save_embeddings(path, ["silk", "red"], np.array([[1.0, 1.0], [2.0, 2.0]]))
    table = np.zeros((3, 2))
    hits = overwrite_rows(table, ["red", "wool", "silk"], path)
    assert hits == 2
    assert np.array_equal(table, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    with pytest.raises(CheckpointError, match="does not match model dim"):
        overwrite_rows(np.zeros((1, 3)), ["red"], path)
