import math

import numpy as np
import torch
from torch import nn

import nets
from encoding import EncodingConfig, SceneCoordinateEmbedding, TokenGrid, encode_rays, fuse, grid_rays
from errors import EmptySequence, NonFiniteLoss
from geometry import Pose, homog_to_translation, rot6d_to_matrix, rot9d_to_matrix

SOFTPLUS_ONE = math.log(math.expm1(1.0))  # softplus(SOFTPLUS_ONE) == 1


def pose_head_bias(rotation_repr):
    """Final-layer bias decoding to the identity pose: t = 0, R = I."""
    translation = (0.0, 0.0, 0.0, SOFTPLUS_ONE)
    if rotation_repr == '6d':
        return translation + (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    elif rotation_repr == '9d':
        return translation + tuple(np.eye(3).flatten())
    raise ValueError(f'Unsupported rotation representation: {rotation_repr}')


def pose_vector_dim(rotation_repr):
    return 4 + (6 if rotation_repr == '6d' else 9)


def decode_pose_vector(vec, rotation_repr):
    """(..., 10) or (..., 13) head outputs -> rotations (..., 3, 3), translations (..., 3)."""
    t = homog_to_translation(vec[..., :4])
    if rotation_repr == '6d':
        R = rot6d_to_matrix(vec[..., 4:10])
    else:
        R = rot9d_to_matrix(vec[..., 4:13].unflatten(-1, (3, 3)))
    return R, t


def pose_loss(R_hat, t_hat, R, t):
    """Per-sample L1 pose loss: entrywise |R_hat - R| plus |t_hat - t|."""
    return (R_hat - R).abs().sum(dim=(-2, -1)) + (t_hat - t).abs().sum(dim=-1)


def total_loss(preds, R, t):
    """Sum of per-head pose losses, each against the same ground truth."""
    return sum(pose_loss(p['R'], p['t'], R, t) for p in preds)


class MapRelativePoseRegressor(nn.Module):

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.enc_cfg = EncodingConfig.from_config(config)
        self.rotation_repr = config['model_rotation_repr']
        self.enable_dynamic_pe = config['model_enable_dynamic_pe']
        dim = config['model_d_model']

        self.pe3d = SceneCoordinateEmbedding(self.enc_cfg)
        self.transformer = nets.ReAttentionStack(
            dim, config['model_ffn_dim'], config['model_n_heads'], config['model_n_blocks'],
            config['model_group_size'], enable_reattention=config['model_enable_reattention'],
            reattention_source=config['model_reattention_source'], layer_norm_eps=config['model_layer_norm_eps'])
        out_dim = pose_vector_dim(self.rotation_repr)
        bias = pose_head_bias(self.rotation_repr)
        # independent weights per head, one head per group
        self.heads = nn.ModuleList([
            nets.PoseHead(dim, out_dim, bias, activation=config['model_head_act'])
            for _ in range(self.transformer.num_groups)])

    @property
    def dtype(self):
        return self.pe3d.conv.weight.dtype

    def encode(self, coords, mask, intrinsics):
        """Fused embeddings of each sample's valid cells, in row-major order, as (1, n_valid) token grids.

        Invalid cells are dropped before anything is computed from them, so padding a map with
        invalid cells leaves the pose unchanged.
        """
        h, w = mask.shape[-2:]
        x_ray, y_ray = grid_rays(intrinsics, h, w, dynamic=self.enable_dynamic_pe, dtype=self.dtype)
        x_ray, y_ray = torch.broadcast_tensors(x_ray, y_ray)
        grids = []
        for b in range(mask.shape[0]):
            keep = mask[b]
            n = int(keep.sum())
            if n == 0:
                raise EmptySequence(f'Sample {b} has no valid scene coordinates')
            valid = torch.ones(1, n, dtype=torch.bool)
            rays = encode_rays(x_ray[b][keep].view(1, n), y_ray[b][keep].view(1, n), self.enc_cfg.d_model)
            pe_3d = self.pe3d(coords[b][keep].view(1, n, 3), valid)
            grids.append(fuse(TokenGrid(rays, valid), pe_3d))
        return grids

    def forward(self, coords, mask, intrinsics, training=None):
        """Returns the pose-head outputs, auxiliary heads first and the final head last.

        coords: (batch, h, w, 3), mask: (batch, h, w), intrinsics: (batch, 4) as fx, fy, cx, cy.
        Only the final head is evaluated unless training. Samples are processed independently.
        """
        training = self.training if training is None else training
        coords = torch.as_tensor(coords, dtype=self.dtype)
        mask = torch.as_tensor(mask, dtype=torch.bool)
        intrinsics = torch.as_tensor(intrinsics, dtype=self.dtype)

        heads = list(range(len(self.heads))) if training else [len(self.heads) - 1]
        vectors = [[] for _ in heads]
        for tokens in self.encode(coords, mask, intrinsics):
            _, groups = self.transformer(tokens.data, tokens.mask)
            for out, i in zip(vectors, heads):
                out.append(self.heads[i](groups[i], tokens.mask))

        preds = []
        for out in vectors:
            vec = torch.cat(out)
            R, t = decode_pose_vector(vec, self.rotation_repr)
            preds.append({'vector': vec, 'R': R, 't': t})
        return preds

    def compute_loss(self, preds, R, t):
        metrics = {}
        if not self.config['model_aux_losses']:
            preds = preds[-1:]
        per_sample = total_loss(preds, R, t)
        loss = per_sample.mean()
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f'Loss is not finite: {loss.item()}')
        for i, p in enumerate(preds):
            name = 'final' if i == len(preds) - 1 else f'aux{i}'
            metrics[f'loss_{name}'] = pose_loss(p['R'], p['t'], R, t).mean().detach()
        metrics['loss'] = loss.detach()
        return loss, metrics

    @torch.no_grad()
    def predict_poses(self, coords, mask, intrinsics):
        """Final-head poses as float64 Pose objects; the pose vector is decoded in double precision."""
        was_training = self.training
        self.eval()
        try:
            preds = self.forward(coords, mask, intrinsics, training=False)
        finally:
            self.train(was_training)
        R, t = decode_pose_vector(preds[-1]['vector'].double(), self.rotation_repr)
        return [Pose(R[i].numpy(), t[i].numpy()) for i in range(R.shape[0])]

    def localize(self, scm, K):
        coords = torch.as_tensor(scm.coords).unsqueeze(0)
        mask = torch.as_tensor(scm.mask).unsqueeze(0)
        intrinsics = torch.as_tensor(K.as_array()).unsqueeze(0)
        return self.predict_poses(coords, mask, intrinsics)[0]


def init_params(config, seed, dtype=torch.float32):
    """Deterministically initialised regressor; untrained heads output the identity pose."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MapRelativePoseRegressor(config)
    return model.to(dtype)


def count_params(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
