import numpy as np
import pytest

from ctd2gan.config import ModelConfig
from ctd2gan.discriminators import ImageCritic, VideoCritic, patch_extent, video_input
from ctd2gan.tensor import nn
from ctd2gan.tensor.autograd import Tensor

CFG = ModelConfig(resolution=64, channel_scale=0.125, head_channels=4)


def test_patch_extents():
    assert patch_extent(64) == 6
    assert patch_extent(256) == 30
    assert patch_extent(32) == 2


def test_image_critic_patch_map_and_score():
    critic = ImageCritic(CFG, np.random.default_rng(0))
    out = critic(np.random.default_rng(1).uniform(size=(3, 64, 64, 4)))
    assert out.patch_map.shape == (3, 6, 6)
    np.testing.assert_allclose(out.score.data, out.patch_map.data.mean(axis=(1, 2)))


def test_video_critic_temporal_schedule():
    critic = VideoCritic(CFG, np.random.default_rng(0)).eval()
    x = Tensor(np.random.default_rng(1).uniform(size=(2, 6, 64, 64, 4)))
    lengths = []
    for conv in critic.convs:
        x = conv(x)
        lengths.append(x.shape[1])
    assert lengths == [5, 4, 3, 2]
    out = critic(np.zeros((2, 6, 64, 64, 4)))
    assert out.patch_map.shape == (2, 6, 6)


def test_critics_reject_bad_inputs():
    ic, vc = ImageCritic(CFG, np.random.default_rng(0)), VideoCritic(CFG, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ic(np.zeros((1, 64, 64, 3)))
    with pytest.raises(ValueError):
        ic(np.zeros((1, 16, 16, 4)))
    with pytest.raises(ValueError):
        vc(np.zeros((1, 5, 64, 64, 4)))


def test_normalized_weights_have_unit_operator_norm_once_converged():
    critic = ImageCritic(CFG, np.random.default_rng(0))
    for conv in critic.convs + [critic.final]:
        # power iteration approaches the top singular value from below, so the
        # normalized norm sits slightly above 1 until the vector has converged
        early = nn.operator_norm(conv.normalized_weight().data)
        conv.sn_u, _ = nn.power_iteration(nn._as_matrix(conv.weight.data), conv.sn_u, 2000)
        late = nn.operator_norm(conv.normalized_weight().data)
        assert 1 - 1e-9 <= late <= 1 + 1e-3
        assert late <= early + 1e-12


def test_past_images_only_ignores_past_flow():
    cfg = ModelConfig(resolution=64, channel_scale=0.125, critic_past_images_only=True)
    critic = VideoCritic(cfg, np.random.default_rng(0)).eval()
    rng = np.random.default_rng(2)
    stack = rng.uniform(size=(1, 6, 64, 64, 4))
    changed = stack.copy()
    changed[:, :5, :, :, 1:] = rng.uniform(size=(1, 5, 64, 64, 3))
    np.testing.assert_array_equal(critic(stack).score.data, critic(changed).score.data)
    changed[:, 5, :, :, 1:] += 1.0
    assert critic(stack).score.data[0] != critic(changed).score.data[0]


def test_video_input_appends_frame_last():
    past, frame = np.zeros((2, 5, 4, 4, 4)), np.ones((2, 4, 4, 4))
    stack = video_input(past, frame).data
    assert stack.shape == (2, 6, 4, 4, 4)
    assert np.all(stack[:, 5] == 1) and np.all(stack[:, :5] == 0)
