import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from contentattack.errors import ParameterError, RegistrationError, UndefinedResultError
from contentattack.harness import (CSV_COLUMNS, bit_depth_reduce, build_report, evaluate_asr, jpeg_defense,
                                   parse_defense, read_report, transfer_matrix, write_report)
from contentattack.models.base import Registry, TorchClassifier


class Fixed(nn.Module):
    """Predicts the class stored in the first pixel (scaled by 10)."""

    def __init__(self, k=3, offset=0):
        super().__init__()
        self.k, self.offset = k, offset

    def forward(self, x):
        cls = (torch.round(x[:, 0, 0, 0] * 10).long() + self.offset) % self.k
        return nn.functional.one_hot(cls, self.k).float()


def _images(classes):
    x = torch.full((len(classes), 3, 4, 4), 0.5)
    x[:, 0, 0, 0] = torch.tensor(classes, dtype=torch.float32) / 10
    return x


def _registry():
    reg = Registry()
    reg.register("a", TorchClassifier(Fixed(), 3, (3, 4, 4)))
    reg.register("b", TorchClassifier(Fixed(offset=1), 3, (3, 4, 4)))
    return reg


def test_asr_examples():
    clf = TorchClassifier(Fixed(), 3, (3, 4, 4))
    assert evaluate_asr(_images([1, 2, 0, 1]), [0, 0, 1, 2], clf) == 100.0
    assert evaluate_asr(_images([1, 2, 0, 1]), [1, 0, 1, 2], clf) == 75.0
    assert evaluate_asr(_images([1, 2]), [1, 2], clf) == 0.0
    with pytest.raises(UndefinedResultError):
        evaluate_asr(_images([]), [], clf)
    with pytest.raises(ParameterError):
        evaluate_asr(_images([1]), [1, 2], clf)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=20))
def test_asr_bounds_and_count(pairs):
    clf = TorchClassifier(Fixed(), 3, (3, 4, 4))
    preds, labels = zip(*pairs)
    asr = evaluate_asr(_images(list(preds)), list(labels), clf)
    assert 0 <= asr <= 100
    assert asr == pytest.approx(100 * sum(p != l for p, l in pairs) / len(pairs))


def test_transfer_matrix_and_black_box_average():
    reg = _registry()
    adv = {"a": (_images([1, 2, 0, 0]), torch.tensor([0, 2, 0, 1])),
           "b": (_images([0, 0]), torch.tensor([0, 0]))}
    m = transfer_matrix(adv, ["a", "b"], reg)
    assert m.asr[0][0] == evaluate_asr(*adv["a"], reg.classifier("a"))
    assert m.is_white_box("a", "a") and not m.is_white_box("a", "b")
    assert m.average_black_box("a") == m.asr[0][1]
    assert m.average_black_box("b") == m.asr[1][0]
    single = transfer_matrix({"a": adv["a"]}, ["b"], reg)
    assert single.asr == [[evaluate_asr(*adv["a"], reg.classifier("b"))]]
    with pytest.raises(RegistrationError):
        transfer_matrix(adv, ["c"], reg)


def test_jpeg_near_lossless_and_near_idempotent():
    g = torch.Generator().manual_seed(0)
    yy, xx = torch.meshgrid(torch.linspace(0, 1, 16), torch.linspace(0, 1, 16), indexing="ij")
    img = torch.stack([yy, xx, (yy + xx) / 2]) * 0.8 + 0.1 + 0.02 * torch.rand(3, 16, 16, generator=g)
    hi = jpeg_defense(img, 100)
    assert (hi - img).abs().max().item() < 0.05
    once = jpeg_defense(img, 75)
    twice = jpeg_defense(once, 75)
    assert (twice - once).abs().max().item() < 0.06
    assert (twice - once).abs().mean().item() < 0.01
    assert torch.equal(jpeg_defense(img, 75), once)
    for q in (0, 101, 7.5):
        with pytest.raises(ParameterError):
            jpeg_defense(img, q)


def test_bit_depth_eight_bits_is_identity_on_every_8bit_value():
    levels = torch.arange(256, dtype=torch.float32) / 255
    img = levels.reshape(1, 16, 16).expand(3, 16, 16)
    out = bit_depth_reduce(img, 8)
    assert torch.equal(torch.round(out * 255), torch.round(img * 255))


def test_bit_depth_one_bit_two_levels():
    x = torch.rand(3, 16, 16)
    out = bit_depth_reduce(x, 1)
    assert set(out.unique().tolist()) <= {0.25, 0.75}
    with pytest.raises(ParameterError):
        bit_depth_reduce(x, 0)
    with pytest.raises(ParameterError):
        bit_depth_reduce(x, 9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_bit_depth_error_bound(bits, seed):
    x = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(seed))
    out = bit_depth_reduce(x, bits)
    assert (out - x).abs().max().item() <= 1 / 2 ** (bits + 1) + 1e-7
    assert out.unique().numel() <= 2 ** bits


def test_parse_defense():
    assert parse_defense("jpeg") == ("jpeg", 75)
    assert parse_defense("bitred:4") == ("bitred", 4)
    with pytest.raises(ParameterError):
        parse_defense("hgd")


def _report(defenses=()):
    reg = _registry()
    clean = (_images([0, 1, 2, 0]), torch.tensor([0, 1, 2, 1]))
    adv = {"a": (_images([1, 1, 2, 2]), torch.tensor([0, 1, 2, 1]))}
    return build_report(clean, adv, reg, defenses=defenses, reconstructions=clean[0])


def test_report_rows_and_defense_rows():
    plain = _report()
    assert [r["attack"] for r in plain.rows] == ["clean", "clean", "ilm", "ilm", "aca", "aca"]
    assert all(r["defense"] == "" for r in plain.rows)
    defended = _report(["jpeg:90", "bitred"])
    extra = [r for r in defended.rows if r["defense"]]
    assert len(extra) == 4 and {r["defense_param"] for r in extra} == {"90", "3"}
    assert plain.asr(surrogate="a", target="a", attack="aca", defense="") == 50.0
    assert all(0 <= r["asr_percent"] <= 100 for r in defended.rows)


def test_report_serialization_round_trip_and_determinism(tmp_path):
    rep = _report(["bitred:2"])
    assert rep.to_csv().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert _report(["bitred:2"]).to_csv() == rep.to_csv()
    write_report(rep, tmp_path / "r.csv")
    write_report(rep, tmp_path / "r.json", "json")
    assert read_report(tmp_path / "r.csv").rows == rep.rows
    assert read_report(tmp_path / "r.json").rows == rep.rows
    assert read_report(tmp_path / "r.csv").to_csv() == rep.to_csv()
    with pytest.raises(ParameterError):
        write_report(rep, tmp_path / "r.txt", "txt")
    (tmp_path / "file").write_text("")
    with pytest.raises(OSError, match="file"):
        write_report(rep, tmp_path / "file" / "r.csv")
    with pytest.raises(OSError, match="missing"):
        read_report(tmp_path / "missing.csv")
