import struct

import numpy as np
import pytest

from antispoof import archive
from antispoof.archive import (
    ArchiveError,
    BadMagicError,
    ModelArchive,
    TruncatedPayloadError,
    VersionMismatchError,
    load_model,
    parse_archive,
    quantize_model,
    quantize_tensor,
    save_model,
    size_report,
    write_archive,
)
from antispoof.models import PRESETS, build_model
from antispoof.tensor import Tensor

from helpers import mutations


@pytest.fixture(scope="module")
def tiny():
    return build_model(PRESETS["light_tiny"](), seed=3)


@pytest.fixture(scope="module")
def tiny_bytes(tiny, tmp_path_factory):
    path = tmp_path_factory.mktemp("arch") / "tiny.aspf"
    save_model(tiny, path)
    return path.read_bytes()


def test_roundtrip_is_bitwise(tiny, tmp_path):
    path = tmp_path / "m.aspf"
    save_model(tiny, path)
    loaded = load_model(path)
    a, b = tiny.snapshot(), loaded.snapshot()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    x = Tensor(np.random.default_rng(0).random((3, 32, 32, 3)))
    assert tiny(x).data.tobytes() == loaded(x).data.tobytes()


@pytest.mark.parametrize("name", ["light_tiny", "heavy_tiny"])
def test_save_load_save_is_byte_identical(name, tmp_path):
    model = build_model(PRESETS[name](), seed=1)
    save_model(model, tmp_path / "a.aspf")
    save_model(load_model(tmp_path / "a.aspf"), tmp_path / "b.aspf")
    assert (tmp_path / "a.aspf").read_bytes() == (tmp_path / "b.aspf").read_bytes()


def test_header_is_canonical_little_endian(tiny_bytes):
    magic, version, hlen = struct.unpack_from("<4sII", tiny_bytes)
    assert (magic, version) == (b"ASPF", 1)
    header = tiny_bytes[12 : 12 + hlen].decode("ascii")
    assert header.startswith('{"payload_bytes":')
    assert ", " not in header


def test_bad_magic(tiny_bytes):
    with pytest.raises(BadMagicError, match="bad magic"):
        parse_archive(b"XXXX" + tiny_bytes[4:])


def test_version_mismatch(tiny_bytes):
    with pytest.raises(VersionMismatchError):
        parse_archive(tiny_bytes[:4] + struct.pack("<I", 2) + tiny_bytes[8:])


def test_truncated_payload(tiny_bytes, tmp_path):
    path = tmp_path / "t.aspf"
    path.write_bytes(tiny_bytes[:-1])
    with pytest.raises(TruncatedPayloadError, match="payload"):
        load_model(path)


def test_archive_mutations_always_raise_named_errors(tiny_bytes):
    outcomes = {"loaded": 0, "rejected": 0}
    for desc, blob in mutations(tiny_bytes, 300, seed=7):
        try:
            parse_archive(blob).to_model()
            outcomes["loaded"] += 1
        except ArchiveError:
            outcomes["rejected"] += 1
    assert sum(outcomes.values()) == 300
    assert outcomes["rejected"] >= 50


def test_header_level_mutations(tiny_bytes):
    _, _, hlen = struct.unpack_from("<4sII", tiny_bytes)
    header = tiny_bytes[12 : 12 + hlen]
    payload = tiny_bytes[12 + hlen :]
    cases = [
        header.replace(b'"dtype":"f32"', b'"dtype":"f64"', 1),
        header.replace(b'"kind":"param"', b'"kind":"buffer"', 1),
        header.replace(b'"offset":0', b'"offset":-4', 1),
        header.replace(b'"family":"light"', b'"family":"huge"', 1),
        header.replace(b'"payload_bytes":', b'"payload_byte":', 1),
        header[:-1],
        b"[]",
        b'{"spec":null,"tensors":[],"payload_bytes":0,"payload_crc32":0}',
    ]
    for h in cases:
        blob = tiny_bytes[:8] + struct.pack("<I", len(h)) + h + payload
        with pytest.raises(ArchiveError):
            parse_archive(blob).to_model()


def test_quantize_arithmetic():
    x = np.array([1.27, 0.5, -1.27, 0.004, 0.006], dtype=np.float32)
    q, params = quantize_tensor(x)
    assert params.scale == pytest.approx(0.01)
    assert params.zero_point == 0
    assert q.dtype == np.int8
    assert q.tolist() == [127, 50, -127, 0, 1]


def test_zero_tensor_quantizes_to_zero_with_unit_scale():
    q, params = quantize_tensor(np.zeros((3, 3), np.float32))
    assert params.scale == 1.0
    assert not q.any()


def test_quantized_model_keeps_biases_and_norms_float(tiny):
    qa = quantize_model(tiny)
    for name, t in qa.tensors.items():
        if name.endswith(("/kernel", "/weights")):
            assert t.quant is not None and t.data.dtype == np.int8
        else:
            assert t.quant is None and t.data.dtype == np.float32


@pytest.mark.parametrize("name", ["light_tiny", "heavy_tiny"])
def test_dequantized_error_is_at_most_half_a_step(name):
    model = build_model(PRESETS[name](), seed=2)
    qa = quantize_model(model)
    params = model.params
    for key, t in qa.tensors.items():
        if t.quant is None:
            continue
        err = np.abs(t.dequantized().astype(np.float64) - params[key].data.astype(np.float64))
        assert err.max() <= t.quant.scale / 2 * (1 + 1e-6)


def test_quantize_rejects_unknown_scheme(tiny):
    with pytest.raises(ValueError):
        quantize_model(tiny, scheme="per_channel_asymmetric")


def test_paper_light_float_archive_size_and_quant_ratio(tmp_path):
    model = build_model(PRESETS["light_paper"](), seed=0)
    f, q = tmp_path / "f.aspf", tmp_path / "q.aspf"
    save_model(model, f)
    write_archive(quantize_model(model), q)
    report = size_report(f, q)
    header = report["float_bytes"] - report["float_payload_bytes"]
    expected = 4 * model.parameter_count() + header
    assert abs(report["float_bytes"] - expected) <= 0.1 * expected
    assert report["ratio"] <= 0.30
    assert report["float_parameters"] == report["quant_parameters"] == model.parameter_count()


def test_empty_model_ratio_defaults_to_one(tmp_path):
    write_archive(ModelArchive(None, {}), tmp_path / "e.aspf")
    report = size_report(tmp_path / "e.aspf", tmp_path / "e.aspf")
    assert report["ratio"] == 1.0
    assert report["warnings"]
    assert "warning" in archive.format_size_report(report)


def test_spec_less_archive_cannot_become_a_model(tmp_path):
    write_archive(ModelArchive(None, {}), tmp_path / "e.aspf")
    with pytest.raises(archive.LayoutError):
        load_model(tmp_path / "e.aspf")
