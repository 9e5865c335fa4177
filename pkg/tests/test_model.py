import numpy as np
import pytest

from dualattn import autodiff as ad
from dualattn import model as M
from dualattn.attention import make_causal_mask, make_padding_mask, multi_head_attention
from dualattn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

from conftest import finite_diff, rel_err


def tiny_cfg(**kw):
    base = dict(
        n_layers=1, n_heads=2, d_model=8, d_ff=16, src_vocab=16, tgt_vocab=16,
        grid_len=4, d_feat=5, p_drop_visual=0.0, p_drop_residual=0.0, max_len=32,
    )
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture
def setup(rng):
    cfg = tiny_cfg()
    params = M.init_params(cfg, seed=11)
    return cfg, params


class TestEmbedding:
    def test_position_term_origin_is_zero(self):
        assert M.positional_encoding(1, 8)[0, 0] == 0.0

    def test_same_token_differs_by_position_term(self, setup):
        cfg, params = setup
        pt = M.bind_params(params, None)
        out = M.embed_with_positions(pt["src_embed"], [5, 5], cfg.d_model).data
        pe = M.positional_encoding(2, cfg.d_model)
        assert np.allclose(out[1] - out[0], pe[1] - pe[0], atol=1e-12)

    def test_lookup_matches_indexing_oracle(self, setup):
        cfg, params = setup
        pt = M.bind_params(params, None)
        ids = [3, 7, 3]
        out = M.embed_with_positions(pt["src_embed"], ids, cfg.d_model).data
        expected = params["src_embed"][ids] * np.sqrt(cfg.d_model) + M.positional_encoding(3, cfg.d_model)
        assert np.allclose(out, expected, atol=1e-12)

    def test_out_of_vocabulary_rejected(self, setup):
        cfg, params = setup
        pt = M.bind_params(params, None)
        with pytest.raises(ValueError, match="vocabulary"):
            M.embed_with_positions(pt["src_embed"], [cfg.src_vocab], cfg.d_model)


class TestEncoder:
    def test_zero_layers_return_embedded_input(self, rng):
        cfg = tiny_cfg(n_layers=0)
        params = M.init_params(cfg, seed=3)
        pt = M.bind_params(params, None)
        out = M.encoder_forward(pt, cfg, [1, 4, 2])
        ref = M.embed_with_positions(pt["src_embed"], [1, 4, 2], cfg.d_model)
        assert np.array_equal(out.data, ref.data)

    def test_single_layer_matches_manual_stack(self, setup):
        """Layer oracle: recompute {self-attn, ff} with explicit calls."""
        cfg, params = setup
        pt = M.bind_params(params, None)
        ids = [2, 9, 4]
        out = M.encoder_forward(pt, cfg, ids)

        x = M.embed_with_positions(pt["src_embed"], ids, cfg.d_model)
        attn = multi_head_attention(M._mha(pt, "enc0.self", cfg.n_heads), x, x, x)
        x = ad.layer_norm(ad.add(x, attn), pt["enc0.ln1.g"], pt["enc0.ln1.b"])
        ff = M._feed_forward(pt, "enc0.ff", x)
        x = ad.layer_norm(ad.add(x, ff), pt["enc0.ln2.g"], pt["enc0.ln2.b"])
        assert np.array_equal(out.data, x.data)

    def test_padded_positions_do_not_leak(self, setup, rng):
        cfg, params = setup
        pt = M.bind_params(params, None)
        ids = np.array([[4, 5, 0, 0], [6, 7, 8, 9]])
        lengths = np.array([2, 4])
        mask = make_padding_mask(lengths, 4)
        out1 = M.encoder_forward(pt, cfg, ids, mask).data
        ids2 = ids.copy()
        ids2[0, 2:] = [13, 14]  # rewrite padded slots with real-looking tokens
        out2 = M.encoder_forward(pt, cfg, ids2, mask).data
        assert np.allclose(out1[0, :2], out2[0, :2], atol=1e-9)
        assert np.allclose(out1[1], out2[1], atol=1e-9)


class TestVisualProjection:
    def test_zero_weights_zero_output(self, setup, rng):
        cfg, params = setup
        params.arrays["vis_proj.w"][:] = 0.0
        params.arrays["vis_proj.b"][:] = 0.0
        pt = M.bind_params(params, None)
        grid = rng.standard_normal((cfg.grid_len, cfg.d_feat))
        assert np.array_equal(
            M.project_visual(pt, cfg, grid).data, np.zeros((cfg.grid_len, cfg.d_model))
        )

    def test_identity_projection(self, rng):
        cfg = tiny_cfg(d_feat=8)
        params = M.init_params(cfg, seed=0)
        params.arrays["vis_proj.w"] = np.eye(8)
        params.arrays["vis_proj.b"][:] = 0.0
        grid = rng.standard_normal((cfg.grid_len, 8))
        out = M.project_visual(M.bind_params(params, None), cfg, grid)
        assert np.allclose(out.data, grid, atol=1e-12)

    def test_matches_matmul_oracle(self, setup, rng):
        cfg, params = setup
        pt = M.bind_params(params, None)
        grid = rng.standard_normal((cfg.grid_len, cfg.d_feat))
        out = M.project_visual(pt, cfg, grid).data
        assert np.allclose(out, grid @ params["vis_proj.w"] + params["vis_proj.b"], atol=1e-12)

    def test_width_mismatch_rejected(self, setup, rng):
        cfg, params = setup
        with pytest.raises(ad.ShapeError):
            M.project_visual(M.bind_params(params, None), cfg, rng.standard_normal((4, 7)))


def _reference_text_only_decoder(pt, cfg, tgt_ids, enc_out):
    """A plain single-source transformer decoder over the text-branch
    weights: masked self-attention, standard cross-attention, feed-forward."""
    from dualattn.attention import MultiHeadParams

    x = M.embed_with_positions(pt["tgt_embed"], tgt_ids, cfg.d_model)
    self_mask = make_causal_mask(len(tgt_ids))
    for i in range(cfg.n_layers):
        attn = multi_head_attention(M._mha(pt, f"dec{i}.self", cfg.n_heads), x, x, x, self_mask)
        x = ad.layer_norm(ad.add(x, attn), pt[f"dec{i}.ln1.g"], pt[f"dec{i}.ln1.b"])
        cross_p = MultiHeadParams(
            w_q=[pt[f"dec{i}.cross.q{j}"] for j in range(cfg.n_heads)],
            w_k=[pt[f"dec{i}.cross.kt{j}"] for j in range(cfg.n_heads)],
            w_v=[pt[f"dec{i}.cross.vt{j}"] for j in range(cfg.n_heads)],
            w_o=pt[f"dec{i}.cross.out"],
        )
        cross = multi_head_attention(cross_p, x, enc_out, enc_out)
        x = ad.layer_norm(ad.add(x, cross), pt[f"dec{i}.ln2.g"], pt[f"dec{i}.ln2.b"])
        ff = M._feed_forward(pt, f"dec{i}.ff", x)
        x = ad.layer_norm(ad.add(x, ff), pt[f"dec{i}.ln3.g"], pt[f"dec{i}.ln3.b"])
    return ad.matmul(x, pt["out_proj"])


class TestDecoder:
    def test_both_sources_absent_rejected(self, setup):
        cfg, params = setup
        with pytest.raises(ValueError):
            M.decoder_forward(M.bind_params(params, None), cfg, [1, 2])

    def test_branch_zero_reduction_is_bitwise(self, setup):
        cfg, params = setup
        pt = M.bind_params(params, None)
        src, tgt = [3, 4, 5], [1, 6, 7]
        enc = M.encoder_forward(pt, cfg, src)
        logits, _ = M.decoder_forward(pt, cfg, tgt, enc_out=enc, visual=None)
        ref = _reference_text_only_decoder(pt, cfg, tgt, enc)
        assert np.array_equal(logits.data, ref.data)

    def test_caption_mode_attends_grid_only(self, setup, rng):
        cfg, params = setup
        pt = M.bind_params(params, None)
        grid = rng.standard_normal((cfg.grid_len, cfg.d_feat))
        vis = M.project_visual(pt, cfg, grid)
        logits, recs = M.decoder_forward(pt, cfg, [1, 5], visual=vis, capture=True)
        assert logits.data.shape == (2, cfg.tgt_vocab)
        branches = {r.branch for r in recs}
        assert branches == {"self", "visual"}

    def test_causal_independence(self, setup, rng):
        cfg, params = setup
        pt = M.bind_params(params, None)
        enc = M.encoder_forward(pt, cfg, [3, 4])
        vis = M.project_visual(pt, cfg, rng.standard_normal((cfg.grid_len, cfg.d_feat)))
        tgt = [1, 5, 6, 7]
        base, _ = M.decoder_forward(pt, cfg, tgt, enc, vis)
        for j in range(1, 4):
            altered = list(tgt)
            altered[j] = 12
            out, _ = M.decoder_forward(pt, cfg, altered, enc, vis)
            assert np.allclose(base.data[:j], out.data[:j], atol=1e-6)

    def test_visual_permutation_invariance_end_to_end(self, setup, rng):
        cfg, params = setup
        pt = M.bind_params(params, None)
        enc = M.encoder_forward(pt, cfg, [3, 4, 5])
        grid = rng.standard_normal((cfg.grid_len, cfg.d_feat))
        perm = rng.permutation(cfg.grid_len)
        l1, _ = M.decoder_forward(pt, cfg, [1, 5], enc, M.project_visual(pt, cfg, grid))
        l2, _ = M.decoder_forward(pt, cfg, [1, 5], enc, M.project_visual(pt, cfg, grid[perm]))
        assert np.allclose(l1.data, l2.data, atol=1e-6)

    def test_logit_rows_softmax_to_distributions(self, setup, rng):
        cfg, params = setup
        pt = M.bind_params(params, None)
        enc = M.encoder_forward(pt, cfg, [3, 4, 5])
        logits, _ = M.decoder_forward(pt, cfg, [1, 5, 6], enc)
        probs = ad.softmax_rows(logits).data
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        assert (probs >= 0).all()

    def test_capture_records_have_normalised_rows(self, setup, rng):
        cfg, params = setup
        pt = M.bind_params(params, None)
        enc = M.encoder_forward(pt, cfg, [3, 4, 5])
        vis = M.project_visual(pt, cfg, rng.standard_normal((cfg.grid_len, cfg.d_feat)))
        _, recs = M.decoder_forward(pt, cfg, [1, 5, 6], enc, vis, capture=True)
        assert {r.branch for r in recs} == {"self", "text", "visual"}
        assert len(recs) == 3 * cfg.n_heads * cfg.n_layers
        for r in recs:
            assert np.allclose(r.weights.sum(axis=-1), 1.0, atol=1e-6)


class TestGreedyDecode:
    def test_eos_first_gives_empty_translation(self):
        cfg = tiny_cfg(n_layers=0)
        params = M.init_params(cfg, seed=1)
        params.arrays["tgt_embed"][:] = 0.0
        params.arrays["tgt_embed"][M.BOS_ID, 0] = 1.0
        params.arrays["out_proj"][:] = 0.0
        params.arrays["out_proj"][0, M.EOS_ID] = 100.0
        out, _ = M.greedy_decode(params, cfg, src_ids=[3, 4])
        assert out == []

    def test_max_len_one(self, setup):
        cfg, params = setup
        out, _ = M.greedy_decode(params, cfg, src_ids=[3, 4], max_len=1)
        assert len(out) <= 1

    def test_ties_break_to_lowest_id(self, setup):
        cfg, params = setup
        params.arrays["out_proj"][:] = 0.0  # all logits equal at every step
        out, _ = M.greedy_decode(params, cfg, src_ids=[3], max_len=5)
        assert out == [0] * 5

    def test_deterministic(self, setup, rng):
        cfg, params = setup
        grid = rng.standard_normal((cfg.grid_len, cfg.d_feat))
        a, _ = M.greedy_decode(params, cfg, src_ids=[3, 4], grid=grid)
        b, _ = M.greedy_decode(params, cfg, src_ids=[3, 4], grid=grid)
        assert a == b

    def test_needs_a_source(self, setup):
        cfg, params = setup
        with pytest.raises(ValueError):
            M.greedy_decode(params, cfg)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, setup, tmp_path):
        cfg, params = setup
        path = tmp_path / "model.dat"
        save_checkpoint(path, cfg, params)
        cfg2, params2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert params2.equals(params)
        for k in params:
            assert params2[k].tobytes() == params[k].tobytes()

    def test_double_round_trip_identical_bytes(self, setup, tmp_path):
        cfg, params = setup
        p1, p2 = tmp_path / "a.dat", tmp_path / "b.dat"
        save_checkpoint(p1, cfg, params)
        save_checkpoint(p2, *load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.dat"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected(self, setup, tmp_path):
        cfg, params = setup
        path = tmp_path / "model.dat"
        save_checkpoint(path, cfg, params)
        path.write_bytes(path.read_bytes()[:-17])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


class TestFullModelGradients:
    def test_small_model_against_central_differences(self, rng):
        cfg = M.ModelConfig(
            n_layers=1, n_heads=2, d_model=4, d_ff=4, src_vocab=6, tgt_vocab=6,
            grid_len=2, d_feat=3, p_drop_visual=0.0,
        )
        params = M.init_params(cfg, seed=5)
        src = [4, 5]
        tgt_in = [1, 4]
        targets = np.array([4, 2])
        grid = rng.standard_normal((2, 3))

        def build():
            tape = ad.Tape()
            pt = M.bind_params(params, tape)
            logits, _ = M.translation_forward(pt, cfg, tgt_in, src_ids=src, grid=grid)
            return ad.smoothed_cross_entropy(logits, targets, None, 0.1), pt, tape

        loss, pt, tape = build()
        gmap = ad.backward(loss, tape)
        # spot-check a cross-section of parameter kinds, incl. both branches
        for name in ("src_embed", "tgt_embed", "dec0.cross.kv0", "dec0.cross.vv1",
                     "dec0.cross.kt1", "enc0.ff.w1", "dec0.ln3.g", "vis_proj.w", "out_proj"):
            g_fd = finite_diff(lambda: float(build()[0].data), params.arrays[name])
            err = rel_err(gmap[pt[name].node_id].data, g_fd)
            assert err < 1e-4, (name, err)
