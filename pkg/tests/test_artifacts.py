import hashlib
import json

from dvmap.artifacts import (
    atomic_write_text,
    dump_json,
    read_json,
    read_jsonl,
    sha256_file,
    stable_u64,
    stable_unit_float,
    write_json,
    write_jsonl,
)


def test_stable_u64_is_deterministic():
    assert stable_u64("a", 1, "b") == stable_u64("a", 1, "b")
    assert stable_u64("a", 1, "b") != stable_u64("a", 1, "c")
    assert 0 <= stable_u64("x") < 2 ** 64


def test_stable_u64_length_prefix_blocks_concatenation_collisions():
    # Without prefixes ("ab","c") and ("a","bc") would hash the same bytes.
    assert stable_u64("ab", "c") != stable_u64("a", "bc")
    assert stable_u64("") != stable_u64("", "")


def test_stable_unit_float_range():
    values = [stable_unit_float("t", i) for i in range(200)]
    assert all(0.0 <= v < 1.0 for v in values)
    # Should look roughly uniform, not constant.
    assert max(values) - min(values) > 0.5


def test_jsonl_round_trip(tmp_path):
    rows = [{"a": 1}, {"b": [1, 2]}, {"c": "ü"}]
    path = tmp_path / "rows.jsonl"
    n = write_jsonl(path, rows)
    assert n == 3
    assert list(read_jsonl(path)) == rows
    # Compact, one object per line, unicode kept readable.
    text = path.read_text(encoding="utf-8")
    assert len(text.splitlines()) == 3
    assert "ü" in text


def test_write_json_round_trip(tmp_path):
    path = tmp_path / "obj.json"
    write_json(path, {"k": [1, 2], "s": "v"})
    assert read_json(path) == {"k": [1, 2], "s": "v"}
    assert path.read_text(encoding="utf-8").endswith("\n")


def test_dump_json_is_stable():
    obj = {"b": 1, "a": [1.5, None]}
    assert dump_json(obj) == dump_json(json.loads(dump_json(obj)))


def test_atomic_write_text_replaces(tmp_path):
    path = tmp_path / "f.txt"
    atomic_write_text(path, "one")
    atomic_write_text(path, "two")
    assert path.read_text(encoding="utf-8") == "two"
    # No stray temp files left behind.
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


def test_sha256_file_matches_hashlib(tmp_path):
    path = tmp_path / "payload.bin"
    path.write_bytes(b"\x00\x01payload")
    assert sha256_file(path) == hashlib.sha256(b"\x00\x01payload").hexdigest()
