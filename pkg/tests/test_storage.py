import pytest

from errors import MissingInputError
from storage import get_storage


def test_write_bytes_is_atomic_and_leaves_no_temp_files(tmp_path) -> None:
    storage = get_storage()
    target = storage.write_bytes(tmp_path / "nested" / "a.bin", b"payload")
    assert target.read_bytes() == b"payload"
    assert [p.name for p in target.parent.iterdir()] == ["a.bin"]


def test_json_round_trip(tmp_path) -> None:
    storage = get_storage()
    storage.write_json(tmp_path / "x.json", {"a": [1, 2.5], "b": None})
    assert storage.read_json(tmp_path / "x.json") == {"a": [1, 2.5], "b": None}


def test_missing_file_raises_missing_input(tmp_path) -> None:
    with pytest.raises(MissingInputError):
        get_storage().read_bytes(tmp_path / "absent.bin")


def test_scene_transaction_commits_on_success(tmp_path) -> None:
    storage = get_storage()
    final = tmp_path / "scenes" / "scene_0000"
    with storage.scene_transaction(final) as staging:
        storage.write_text(staging / "f.txt", "ok")
    assert (final / "f.txt").read_text() == "ok"
    assert [p.name for p in final.parent.iterdir()] == ["scene_0000"]


def test_scene_transaction_rolls_back_on_failure(tmp_path) -> None:
    storage = get_storage()
    final = tmp_path / "scenes" / "scene_0001"
    with pytest.raises(RuntimeError):
        with storage.scene_transaction(final) as staging:
            storage.write_text(staging / "f.txt", "half")
            raise RuntimeError("boom")
    assert not final.exists()
    assert list(final.parent.iterdir()) == []


def test_delete_removes_directory_tree(tmp_path) -> None:
    storage = get_storage()
    storage.write_text(tmp_path / "d" / "e" / "f.txt", "x")
    storage.delete(tmp_path / "d")
    assert not storage.exists(tmp_path / "d")
