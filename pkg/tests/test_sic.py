import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from semsic.channel import UserLink, transmit_mac
from semsic.codec import (CodecDims, SymbolFrame, decoded_lengths, frame_from_features, load_checkpoint,
                          parameter_digest, save_checkpoint, unpack_frame)
from semsic.sic import (GDN, IFGNet, SemanticSystem, SicError, SideInfoCache, TwoPhasePlan, equalize,
                        ids_to_tensor, ifg_fuse, reencode_cancel, reencode_text, semantic_sic_decode,
                        sic_forward, two_phase_decode)

V = 11
DIMS = CodecDims(d=16, c=4, N=6, L=3, layers=1, heads=2, dropout=0.0)


def make_system(users=(1, 2, 3), use_si=True, seed=0):
    torch.manual_seed(seed)
    s = SemanticSystem(V, DIMS, users, use_si).double()
    s.eval()
    return s


def random_ids(seed, L=DIMS.L, N=DIMS.N):
    rng = np.random.default_rng(seed)
    ids = rng.integers(2, V, size=(L, N))
    lengths = rng.integers(2, N, size=L)
    for j, n in enumerate(lengths):
        ids[j, n:] = 0
    return ids, lengths


def transmit(system, u, ids, lengths, power):
    _, r = system.enc(u)(torch.as_tensor(ids))
    return frame_from_features(r, lengths, power, u)


class OracleDecoder(nn.Module):
    """Decoder stand-in that emits one-hot scores of fixed ids."""

    def __init__(self, ids):
        super().__init__()
        self.ids = torch.as_tensor(ids)
        self.dummy = nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, r_hat):
        scores = torch.nn.functional.one_hot(self.ids, V).to(torch.float64)
        return scores, torch.zeros(*self.ids.shape, DIMS.m, dtype=torch.float64)


def test_equalize_examples():
    y = torch.tensor([2 + 2j], dtype=torch.complex128)
    assert torch.equal(equalize(y, UserLink(1, 1.0, 2.0)), torch.tensor([1 + 1j], dtype=torch.complex128))
    with pytest.raises(SicError):
        equalize(y, UserLink(1, 1.0, 0.0))


def test_gdn_is_near_identity_at_init_and_keeps_shape():
    x = torch.randn(2, 6, 5)
    g, ig = GDN(6), GDN(6, inverse=True)
    assert g(x).shape == x.shape and ig(x).shape == x.shape
    assert torch.all(torch.sign(g(x)) == torch.sign(x))
    small = 1e-3 * x
    assert torch.allclose(g(small), small, rtol=1e-3, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 7), st.sampled_from([2, 4, 6]), st.integers(1, 3))
def test_ifg_preserves_shape(L, N, c, n_side):
    net = IFGNet(3, n_side, c)
    r = torch.randn(L, N, c)
    g = net(r, [torch.randn(L, N, c) for _ in range(n_side)])
    assert g.shape == r.shape


def test_ifg_zero_fusion_reduces_to_relu_residual():
    net = IFGNet(2, 1, 4)
    net.zero_fusion = True
    r = torch.randn(3, 5, 4)
    assert torch.equal(net(r, [torch.randn(3, 5, 4)]), torch.relu(r))
    assert torch.count_nonzero(net(-r.abs() - 0.1, [r])) == 0


def test_ifg_needs_side_information():
    with pytest.raises(SicError):
        ifg_fuse(torch.randn(1, 2, 4), SideInfoCache(), IFGNet(2, 1, 4))
    with pytest.raises(SicError):
        IFGNet(2, 2, 4)(torch.randn(1, 2, 4), [torch.randn(1, 2, 4)])
    with pytest.raises(SicError):
        IFGNet(1, 0, 4)


def test_side_info_shapes_must_match():
    cache = SideInfoCache()
    cache.append(1, torch.zeros(1, 2, 4))
    with pytest.raises(SicError):
        cache.append(2, torch.zeros(1, 3, 4))


def test_perfect_reencoding_cancels_to_machine_precision():
    system = make_system()
    links = [UserLink(1, 8.0, 0.9 + 0.3j), UserLink(2, 3.0, -0.7j), UserLink(3, 1.0, 0.5)]
    frames, truth = [], {}
    for l in links:
        ids, lengths = random_ids(l.index)
        frames.append(transmit(system, l.index, ids, lengths, l.power))
        truth[l.index] = (ids, lengths)
    y = transmit_mac(frames, links, 0.0).y
    for l, f in zip(links, frames):
        u, _ = system.enc(l.index)(torch.as_tensor(truth[l.index][0]))
        before = y
        y, r_tilde = reencode_cancel(y, u, system.enc(l.index), l, truth[l.index][1])
        assert r_tilde.shape == (DIMS.L, DIMS.N, DIMS.c)
        if l.index == 1:
            # after cancelling user 1, equalizing for user 2 sees only users 2 and 3
            rest = links[1].h * frames[1].symbols + links[2].h * frames[2].symbols
            assert torch.linalg.norm(y - rest) <= 1e-9 * torch.linalg.norm(l.h * f.symbols)
        assert torch.allclose(before - y, l.h * f.symbols, atol=1e-12)
    norm = torch.linalg.norm(torch.stack([l.h * f.symbols for l, f in zip(links, frames)]))
    assert torch.linalg.norm(y) <= 1e-9 * norm


def test_two_user_perfect_decode_leaves_user_two_exactly():
    system = make_system((1, 2))
    links = [UserLink(1, 4.0), UserLink(2, 1.0)]
    ids1, len1 = random_ids(1)
    ids2, len2 = random_ids(2)
    f1, f2 = transmit(system, 1, ids1, len1, 4.0), transmit(system, 2, ids2, len2, 1.0)
    y = transmit_mac([f1, f2], links, 0.0).y
    u1, _ = system.enc(1)(torch.as_tensor(ids1))
    y2, _ = reencode_cancel(y, u1, system.enc(1), links[0], len1)
    assert torch.allclose(equalize(y2, links[1]), f2.symbols, atol=1e-12)


def test_zero_length_decode_cancels_nothing():
    system = make_system((1,))
    y = torch.ones(DIMS.M, dtype=torch.complex128)
    u = torch.randn(DIMS.L, DIMS.N, DIMS.m, dtype=torch.float64)
    y2, r = reencode_cancel(y, u, system.enc(1), UserLink(1, 1.0), np.zeros(DIMS.L, dtype=int))
    assert torch.equal(y2, y) and torch.count_nonzero(r) == 0


def test_ids_to_tensor_truncates_at_end_marker():
    t = ids_to_tensor(np.array([[4, 5, 0, 7, 8]]))
    assert t.tolist() == [[4, 5, 0, 0, 0]]


def test_single_user_sic_is_the_plain_receive_chain():
    system = make_system((1,), use_si=False)
    ids, lengths = random_ids(4)
    f = transmit(system, 1, ids, lengths, 2.0)
    link = UserLink(1, 2.0, 1.3 - 0.2j)
    y = transmit_mac([f], [link], 0.0).y
    out = semantic_sic_decode(y, [link], system, {1: f.scale})
    with torch.no_grad():
        scores, _ = system.dec(1)(unpack_frame(equalize(y, link), DIMS) / f.scale)
    assert np.array_equal(out[1], scores.argmax(-1).numpy())


def test_decode_is_invariant_to_link_list_order():
    system = make_system()
    system.ensure_ifgs([1, 2, 3])
    links = [UserLink(1, 8.0), UserLink(2, 3.0), UserLink(3, 1.0)]
    frames = [transmit(system, l.index, *random_ids(l.index + 10), l.power) for l in links]
    y = transmit_mac(frames, links, 1.0, torch.Generator().manual_seed(0)).y
    scales = {f.user_index: f.scale for f in frames}
    a = semantic_sic_decode(y, links, system, scales)
    b = semantic_sic_decode(y, links[::-1], system, scales)
    assert all(np.array_equal(a[u], b[u]) for u in (1, 2, 3))


def test_user_one_never_uses_an_ifg():
    system = make_system()
    system.ensure_ifgs([1, 2, 3])
    assert "1" not in system.ifgs
    assert system.ifg(2).n_side == 1 and system.ifg(3).n_side == 2


def test_explicit_order_overrides_ranking():
    system = make_system(use_si=False)
    links = [UserLink(1, 1.0), UserLink(2, 5.0), UserLink(3, 2.0)]
    frames = [transmit(system, l.index, *random_ids(l.index), 1.0) for l in links]
    y = transmit_mac(frames, links, 0.0).y
    scales = {f.user_index: f.scale for f in frames}
    assert sic_forward(y, links, system, scales).order == [2, 3, 1]
    assert sic_forward(y, links, system, scales, order=[1, 2, 3]).order == [1, 2, 3]
    with pytest.raises(SicError):
        sic_forward(y, links, system, scales, order=[1, 2])


def test_two_phase_plan_partitions():
    links = [UserLink(1, 10.0), UserLink(2, 5.0), UserLink(3, 1.0)]
    plan = TwoPhasePlan.from_links(links, [1, 2], [3])
    assert plan.g1 == (1, 2) and plan.g2 == () and plan.phase_one == (1, 2, 3)
    links = [UserLink(1, 10.0), UserLink(2, 5.0), UserLink(3, 20.0)]
    plan = TwoPhasePlan.from_links(links, [1, 2], [3])
    assert plan.g1 == () and plan.g2 == (1, 2) and plan.phase_one == (3,)
    links5 = [UserLink(i, p) for i, p in zip(range(1, 6), (9.0, 7.0, 2.0, 5.0, 1.0))]
    plan = TwoPhasePlan.from_links(links5, [1, 2, 3], [4, 5])
    assert plan.g1 == (1, 2, 3) and plan.new_users == (4, 5)
    with pytest.raises(SicError):
        TwoPhasePlan.from_links(links, [1, 2], [2])


def test_two_phase_with_no_new_users_matches_plain_sic():
    system = make_system((1, 2))
    system.ensure_ifgs([1, 2])
    links = [UserLink(1, 6.0), UserLink(2, 1.5)]
    frames = [transmit(system, l.index, *random_ids(l.index), l.power) for l in links]
    y = transmit_mac(frames, links, 1.0, torch.Generator().manual_seed(3)).y
    scales = {f.user_index: f.scale for f in frames}
    plan = TwoPhasePlan.from_links(links, [1, 2], [])
    a = two_phase_decode(y, links, plan, system, scales)
    b = semantic_sic_decode(y, links, system, scales)
    assert all(np.array_equal(a[u], b[u]) for u in (1, 2))


@pytest.mark.parametrize("new_power", [0.5, 30.0])
def test_two_phase_perfect_new_user_cancellation_is_bit_identical(new_power):
    system = make_system((1, 2, 3))
    links = [UserLink(1, 8.0, 0.8 + 0.1j), UserLink(2, 3.0, 0.9j), UserLink(3, new_power, 1.0)]
    plan = TwoPhasePlan.from_links(links, [1, 2], [3])
    system.ensure_ifgs([1, 2])               # the old K-user decoder
    system.ensure_ifgs(list(plan.phase_one))  # phase one; G1 keeps its positions
    truth = {u: random_ids(u + 20) for u in (1, 2, 3)}
    ids3 = ids_to_tensor(truth[3][0]).numpy()
    system.decoders["3"] = OracleDecoder(ids3)
    old_frames = [transmit(system, u, *truth[u], l.power) for u, l in zip((1, 2), links)]
    with torch.no_grad():
        x3 = reencode_text(ids3, system.enc(3), links[2]) / links[2].h
    f3 = SymbolFrame(3, x3, new_power, torch.tensor(1.0, dtype=torch.float64))
    y = transmit_mac(old_frames + [f3], links, 0.0).y
    y_old = transmit_mac(old_frames, links[:2], 0.0).y
    scales = {1: old_frames[0].scale, 2: old_frames[1].scale, 3: f3.scale}
    both = two_phase_decode(y, links, plan, system, scales)
    alone = semantic_sic_decode(y_old, links[:2], system, scales)
    assert np.array_equal(both[3], ids3)
    assert np.array_equal(both[1], alone[1]) and np.array_equal(both[2], alone[2])


def test_checkpoint_modules_round_trip(tmp_path):
    system = make_system()
    system.ensure_ifgs([1, 2, 3])
    save_checkpoint(tmp_path / "s.pt", system.checkpoint_modules(), {"use_si": True})
    states, _ = load_checkpoint(tmp_path / "s.pt")
    other = SemanticSystem(V, DIMS, use_si=True).double()
    other.load_states(states)
    assert parameter_digest([system]) == parameter_digest([other])


def test_decoded_lengths_feed_framing():
    ids = np.array([[3, 4, 0, 0], [5, 5, 5, 5]])
    assert decoded_lengths(ids).tolist() == [2, 4]
