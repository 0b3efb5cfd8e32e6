import numpy as np
import pytest
import torch

from dwpseg import kernel_bank
from dwpseg.architectures import NetworkSpec, UNet3D, build_unet, layer_table, resolution_groups
from dwpseg.errors import FormatError, VersionError
from dwpseg.kernel_bank import KernelBank, collect, merge, normalize


def bank_of(seed, spec=None):
    spec = spec or NetworkSpec.toy()
    net = build_unet(spec, torch.Generator().manual_seed(seed))
    return collect(net, resolution_groups(spec), f"net{seed}")


def test_full_width_slice_count():
    spec = NetworkSpec.full()
    net = UNet3D(spec)
    bank = collect(net, resolution_groups(spec))
    # every 3x3x3 layer contributes c_in * c_out slices
    expected = 1 * 16 + 16 * 32 + 32 * 32 * 7 + 32 * 64 + 64 * 64 * 3 + 32 * 32 * 4 + 16 * 16 * 2
    assert expected == sum(i.c_in * i.c_out for i in layer_table(spec) if i.kernel == 3)
    assert bank.total() == expected


def test_toy_has_seven_groups():
    assert sorted(bank_of(0).counts()) == list(range(1, 8))
    assert all(n > 0 for n in bank_of(0).counts().values())


def test_collect_deterministic():
    a, b = bank_of(3), bank_of(3)
    for g in a.groups:
        assert np.array_equal(a.groups[g], b.groups[g])


def test_collect_missing_layer():
    spec = NetworkSpec.toy()
    gm = resolution_groups(spec)
    gm.pop("down3.conv_1")
    with pytest.raises(ValueError):
        collect(UNet3D(spec), gm)


def test_merge_counts():
    banks = [bank_of(s) for s in range(20)]
    merged = merge(banks)
    single = banks[0].counts()
    assert merged.counts() == {g: 20 * n for g, n in single.items()}
    assert len(merged.provenance) == 20 * len(banks[0].provenance)
    assert merge([banks[0]]) is banks[0]
    left = merge([merge(banks[:2]), banks[2]]).counts()
    right = merge([banks[0], merge(banks[1:3])]).counts()
    assert left == right


def test_merge_rejects_normalized():
    with pytest.raises(ValueError):
        merge([normalize(bank_of(0)), bank_of(1)])


def test_normalize_range_and_round_trip():
    raw = bank_of(0)
    norm = normalize(raw)
    for g in raw.groups:
        assert np.abs(norm.groups[g]).max() <= 0.99 + 1e-7
        assert np.allclose(norm.denormalize(g), raw.groups[g], rtol=0, atol=1e-6)


def test_normalize_idempotent():
    norm = normalize(bank_of(0))
    again = normalize(norm)
    for g in norm.groups:
        assert np.max(np.abs(again.groups[g] - norm.groups[g])) <= 1e-12


def test_normalize_constant_group():
    bank = KernelBank({1: np.full((4, 1, 3, 3, 3), 0.25)})
    norm = normalize(bank)
    assert norm.norm_constants[1] == (0.25, 1.0)
    assert np.all(norm.groups[1] == 0)


def test_bank_round_trip(tmp_path):
    bank = normalize(merge([bank_of(0), bank_of(1)]))
    kernel_bank.save(bank, tmp_path / "b.bank")
    back = kernel_bank.load(tmp_path / "b.bank")
    assert back.norm_constants == bank.norm_constants
    assert back.provenance == bank.provenance
    for g in bank.groups:
        assert back.groups[g].tobytes() == bank.groups[g].tobytes()


def test_empty_group_round_trip(tmp_path):
    bank = KernelBank({1: np.zeros((0, 1, 3, 3, 3)), 2: np.ones((3, 1, 3, 3, 3))})
    kernel_bank.save(bank, tmp_path / "e.bank")
    back = kernel_bank.load(tmp_path / "e.bank")
    assert back.counts() == {1: 0, 2: 3}


def test_bank_corrupted_header(tmp_path):
    p = tmp_path / "b.bank"
    kernel_bank.save(bank_of(0), p)
    raw = bytearray(p.read_bytes())
    raw[4:6] = (7).to_bytes(2, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        kernel_bank.load(p)
    p.write_bytes(b"DWPK\x01\x00")
    with pytest.raises(FormatError):
        kernel_bank.load(p)
