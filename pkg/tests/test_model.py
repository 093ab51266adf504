import numpy as np
import pytest

from biped.config import BiPedConfig, micro_config, parse_config, tiny_config
from biped.errors import ConfigError, DimensionError, InputError
from biped.gradcheck import model_problem
from biped.model import BiPedModel, BranchOutput, ObservationBatch, fuse
from biped.tensor import Tensor


def lstm(n_in, h):
    return 4 * h * (n_in + h + 1)


def dense(n_in, n_out):
    return n_out * (n_in + 1)


def expected_count(c):
    """Parameter count written out from the architecture description."""
    h = c.hidden_size
    ncls = (c.image_width // c.grid_cell) * (c.image_height // c.grid_cell)
    total, ctx = 0, 0
    if c.use_mie:
        total += lstm(4, h) + ncls * c.mje_embed_size + lstm(c.mje_embed_size, h) + lstm(3, h)
        ctx += 3 * h
    if c.use_mje:
        e = c.mje_embed_size
        total += dense(4, e) + ncls * e + dense(3, e) + lstm(3 * e, h)
        ctx += h
    if c.use_cim:
        total += (8 * 25 + 8) + (16 * 8 * 25 + 16) + (32 * 16 * 9 + 32)
        k = 5 if c.cim_categorical else 1
        total += k * lstm(32, c.cim_hidden)
        f = k * c.cim_hidden
        total += f * f + c.iau_dim * 2 * f if c.use_iau else dense(f, c.iau_dim)
        ctx += c.iau_dim
    d = ctx + (0 if c.ego_future_mode == "none" else 3)
    if c.ego_future_mode == "predicted":
        total += lstm(ctx, h) + dense(h, 3)
    if c.use_mip:
        total += lstm(d, h) + dense(h, 4) + lstm(d, h) + dense(h, 1)
        if c.use_grid_task:
            total += lstm(d, h) + dense(h, ncls)
    if c.use_mjp:
        e = c.mjp_embed_size
        total += lstm(d, h) + dense(h, e) + dense(e, 4) + dense(e, 1)
        if c.use_grid_task:
            total += dense(e, ncls)
    return total


def random_batch(config, rng, b=3, with_maps=True):
    m = config.obs_len
    tl = rng.uniform(100, 800, size=(b, 1, 2)) + np.arange(m)[None, :, None] * 3.0
    boxes = np.concatenate([tl, tl + 50], axis=2)
    maps = None
    if with_maps and config.use_cim:
        maps = (rng.random((b, m, 5, config.map_height, config.map_width)) < 0.1).astype(float)
    return ObservationBatch(
        boxes=boxes, grid=np.zeros((b, m), dtype=int), ego=rng.uniform(0, 10, (b, m, 3)),
        maps=maps, future_ego=rng.uniform(0, 10, (b, config.pred_len, 3)),
    )


class TestParameterCount:
    @pytest.mark.parametrize("config", [
        BiPedConfig(), micro_config(), tiny_config(),
        micro_config(use_mje=False, use_mjp=False), micro_config(use_cim=False),
        micro_config(cim_categorical=False, use_iau=False), micro_config(use_grid_task=False),
        micro_config(ego_future_mode="none"), micro_config(grid_cell=15),
    ], ids=["full", "micro", "tiny", "mie_mip", "no_cim", "single_hybrid", "no_grid", "nfe", "gc15"])
    def test_matches_formula(self, config):
        assert BiPedModel(config).num_parameters() == expected_count(config)

    def test_frozen_values(self):
        assert BiPedModel(BiPedConfig()).num_parameters() == 8_430_666
        assert BiPedModel(micro_config()).num_parameters() == 219_578
        assert BiPedModel(tiny_config()).num_parameters() == 15_801

    def test_seed_changes_values_not_structure(self):
        a, b = BiPedModel(micro_config(), seed=0), BiPedModel(micro_config(), seed=1)
        assert a.params.names() == b.params.names()
        assert not np.array_equal(a.params["mie.box.W"].data, b.params["mie.box.W"].data)


class TestForward:
    def test_output_shapes(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5)
        model = BiPedModel(cfg)
        out = model.forward(random_batch(cfg, rng))
        assert out.boxes.shape == (3, 5, 4)
        assert out.action.shape == (3,)
        assert out.grid.shape == (3, cfg.num_grid_classes)
        assert out.attention.shape == (3, 4)
        np.testing.assert_allclose(out.grid.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((out.action.data > 0) & (out.action.data < 1))

    def test_fusion_is_exact_mean(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5)
        out = BiPedModel(cfg).forward(random_batch(cfg, rng))
        for name in ("boxes", "action", "grid"):
            a, b = getattr(out.mip, name).data, getattr(out.mjp, name).data
            np.testing.assert_array_equal(getattr(out, name).data, (a + b) / 2)

    def test_fuse_example(self):
        out = fuse(BranchOutput(None, Tensor([0.2]), None), BranchOutput(None, Tensor([0.6]), None))
        np.testing.assert_allclose(out.action.data, [0.4], atol=1e-15)
        assert out.grid is None

    def test_zero_action_head_gives_one_half(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5)
        model = BiPedModel(cfg)
        for name, p in model.params.items():
            if "act_out" in name:
                p.data = np.zeros(p.shape)
        out = model.forward(random_batch(cfg, rng))
        np.testing.assert_array_equal(out.action.data, 0.5)

    def test_single_decoder_passes_through(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5, use_mjp=False)
        out = BiPedModel(cfg).forward(random_batch(cfg, rng))
        assert out.mjp is None
        np.testing.assert_array_equal(out.boxes.data, out.mip.boxes.data)
        with pytest.raises(ConfigError):
            fuse(None, None)

    def test_no_grid_task(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5, use_grid_task=False)
        out = BiPedModel(cfg).forward(random_batch(cfg, rng))
        assert out.grid is None

    def test_boxes_pixels_round_trip(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5)
        batch = random_batch(cfg, rng)
        out = BiPedModel(cfg).forward(batch)
        px = out.boxes_pixels()
        np.testing.assert_allclose((px - batch.boxes[:, -1][:, None]) / cfg.image_width, out.boxes.data)

    def test_ego_modes(self, rng):
        base = micro_config(obs_len=4, pred_len=5, use_cim=False)
        batch = random_batch(base, rng)
        gt = BiPedModel(base).forward(batch)
        assert gt.ego_pred is None
        pred = BiPedModel(base.replace(ego_future_mode="predicted")).forward(batch)
        assert pred.ego_pred.shape == (3, 5, 3)
        none = BiPedModel(base.replace(ego_future_mode="none"))
        batch.future_ego = None
        assert none.forward(batch).boxes.shape == (3, 5, 4)
        with pytest.raises(InputError):
            BiPedModel(base).forward(batch)

    def test_future_ego_changes_output_only_when_used(self, rng):
        base = micro_config(obs_len=4, pred_len=5, use_cim=False)
        batch = random_batch(base, rng)
        other = random_batch(base, rng)
        other.boxes, other.grid, other.ego = batch.boxes, batch.grid, batch.ego
        gt = BiPedModel(base)
        assert not np.allclose(gt.forward(batch).boxes.data, gt.forward(other).boxes.data)
        nfe = BiPedModel(base.replace(ego_future_mode="none"))
        np.testing.assert_array_equal(nfe.forward(batch).boxes.data, nfe.forward(other).boxes.data)

    def test_input_validation(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5)
        model = BiPedModel(cfg)
        with pytest.raises(InputError):
            model.forward(random_batch(cfg, rng, with_maps=False))
        batch = random_batch(cfg, rng)
        batch.maps = batch.maps[:, :, :, :10]
        with pytest.raises(DimensionError):
            model.forward(batch)
        with pytest.raises(DimensionError):
            model.forward(random_batch(micro_config(obs_len=3), rng))
        with pytest.raises(InputError):
            ObservationBatch(boxes=np.array([[[10.0, 0, 5, 5]]]), grid=[[0]], ego=np.zeros((1, 1, 3)))
        bad = random_batch(cfg, rng)
        bad.grid[0, 0] = cfg.num_grid_classes
        with pytest.raises(InputError):
            model.forward(bad)

    def test_disabled_module_refuses_call(self, rng):
        cfg = micro_config(obs_len=4, pred_len=5, use_mie=False)
        with pytest.raises(ConfigError):
            BiPedModel(cfg).encode_mie(random_batch(cfg, rng))

    def test_whole_model_loss_is_deterministic(self):
        _, loss_a = model_problem(seed=2)
        _, loss_b = model_problem(seed=2)
        assert loss_a().item() == loss_b().item()


class TestConfig:
    def test_text_round_trip(self):
        cfg = micro_config(use_iau=False, ego_future_mode="none")
        assert parse_config(cfg.to_text()) == cfg

    @pytest.mark.parametrize("text", [
        "hidden_size = 0", "use_mie = maybe", "grid_cell = 7", "bogus = 1", "hidden_size 4",
        "use_mie = false\nuse_mje = false\nuse_cim = false", "use_mip = false\nuse_mjp = false",
        "ego_future_mode = sometimes", "hidden_size = 4\nhidden_size = 5",
    ])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# sizes\n\nhidden_size = 16  # small\n")
        assert cfg.hidden_size == 16
