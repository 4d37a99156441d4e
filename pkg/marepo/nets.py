import itertools
import math

import torch
import torch.nn.functional as F
from torch import nn

from errors import EmptySequence, ShapeMismatch

ACTIVATIONS = {
    'linear': nn.Identity,
    'relu': nn.ReLU,
    'gelu': nn.GELU,
    'elu': nn.ELU,
}


def get_activation(nonlinearity):
    if nonlinearity is None:
        nonlinearity = 'linear'
    if nonlinearity not in ACTIVATIONS:
        raise ValueError(f'Unsupported nonlinearity: {nonlinearity}')
    return ACTIVATIONS[nonlinearity]()


def activation_gain(nonlinearity):
    # relu gain for every nonlinearity but linear
    return torch.nn.init.calculate_gain('linear' if nonlinearity in (None, 'linear') else 'relu')


def kaiming_uniform_(weight, nonlinearity):
    fan_in = weight.shape[1] * weight[0, 0].numel()
    bound = math.sqrt(3.0) * activation_gain(nonlinearity) / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound)


class _LayerStack(nn.Module):
    """Layers `{prefix}1 .. {prefix}N` with a shared activation between them, none after the last."""

    def __init__(self, prefix, layers, nonlinearity, final_bias_init=None):
        super().__init__()
        self.prefix = prefix
        self.num_layers = len(layers)
        self.nonlinearity = nonlinearity
        self.final_bias_init = final_bias_init
        self.act = get_activation(nonlinearity)
        for i, layer in enumerate(layers):
            self.add_module(f'{prefix}{i + 1}', layer)
        self.reset_parameters()

    @property
    def final_layer(self):
        return getattr(self, f'{self.prefix}{self.num_layers}')

    def reset_parameters(self):
        for i in range(self.num_layers):
            layer = getattr(self, f'{self.prefix}{i + 1}')
            kaiming_uniform_(layer.weight, self.nonlinearity if i < self.num_layers - 1 else 'linear')
            nn.init.zeros_(layer.bias)
        if self.final_bias_init is not None:
            bias = self.final_layer.bias
            with torch.no_grad():
                bias.copy_(torch.as_tensor(self.final_bias_init, dtype=bias.dtype).expand_as(bias))

    def forward(self, x):
        for i in range(self.num_layers - 1):
            x = self.act(getattr(self, f'{self.prefix}{i + 1}')(x))
        return self.final_layer(x)


class MLP(_LayerStack):

    def __init__(self, in_dim, hidden_dims, out_dim, nonlinearity, final_bias_init=None):
        dims = (in_dim,) + tuple(hidden_dims) + (out_dim,)
        layers = [nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])]
        super().__init__('linear', layers, nonlinearity, final_bias_init)


class PointwiseCNN(_LayerStack):
    """1x1 convolutions over (batch, channels, h, w) maps."""

    def __init__(self, in_dim, hidden_dims, out_dim, nonlinearity):
        dims = (in_dim,) + tuple(hidden_dims) + (out_dim,)
        layers = [nn.Conv2d(a, b, kernel_size=1) for a, b in zip(dims[:-1], dims[1:])]
        super().__init__('conv', layers, nonlinearity)


def elu_feature_map(x):
    return F.elu(x) + 1


def _kernel_attention(phi_q, phi_k, v):
    kv = torch.einsum('...nd,...ne->...de', phi_k, v)
    k_sum = phi_k.sum(dim=-2)
    num = torch.einsum('...nd,...de->...ne', phi_q, kv)
    den = torch.einsum('...nd,...d->...n', phi_q, k_sum)
    return num / den.unsqueeze(-1)


def linear_attention(q, k, v, mask=None):
    """Kernelized attention with phi(x) = elu(x) + 1.

    q, k, v: (..., n, d); mask: (..., n) or broadcastable to it. Masked tokens are dropped
    before the sums, so the valid outputs do not depend on how many masked tokens there are;
    masked queries produce zero outputs.
    """
    if q.shape[-2] == 0:
        raise EmptySequence('Attention over an empty sequence')
    if mask is None or bool(mask.all()):
        return _kernel_attention(elu_feature_map(q), elu_feature_map(k), v)

    mask = torch.broadcast_to(mask.to(torch.bool), q.shape[:-1])
    if torch.any(mask.sum(-1) == 0):
        raise EmptySequence('Attention with no valid tokens')
    out = v.new_zeros(*q.shape[:-1], v.shape[-1])
    for idx in itertools.product(*(range(s) for s in q.shape[:-2])):
        keep = mask[idx]
        out[idx + (keep,)] = _kernel_attention(
            elu_feature_map(q[idx][keep]), elu_feature_map(k[idx][keep]), v[idx][keep])
    return out


class MultiheadLinearAttention(nn.Module):

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeMismatch(f'dim {dim} is not divisible by num_heads {num_heads}')
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv_proj = nn.Linear(dim, 3 * dim, bias=False)
        self.out_proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x, mask):
        batch_size, n, _ = x.shape
        qkv = self.qkv_proj(x)
        q, k, v = torch.chunk(qkv, 3, dim=-1)
        # [batch_size x num_heads x n x head_dim]
        q, k, v = [t.view(batch_size, n, self.num_heads, self.head_dim).transpose(1, 2) for t in (q, k, v)]
        context = linear_attention(q, k, v, mask.unsqueeze(1))
        context = context.transpose(1, 2).reshape(batch_size, n, self.dim)
        return self.out_proj(context)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then + FFN(LN(.)); masked tokens receive no update."""

    def __init__(self, dim, feedforward_dim, num_heads, activation='gelu', layer_norm_eps=1e-5):
        super().__init__()
        self.dim = dim
        self.self_attn = MultiheadLinearAttention(dim, num_heads)
        self.linear1 = nn.Linear(dim, feedforward_dim)
        self.linear2 = nn.Linear(feedforward_dim, dim)
        self.norm1 = nn.LayerNorm(dim, eps=layer_norm_eps)
        self.norm2 = nn.LayerNorm(dim, eps=layer_norm_eps)
        self.act = get_activation(activation)

    def _ff(self, x):
        return self.linear2(self.act(self.linear1(x)))

    def forward(self, x, mask):
        if x.ndim != 3 or x.shape[-1] != self.dim or mask.shape != x.shape[:2]:
            raise ShapeMismatch(f'Block expects (batch, n, {self.dim}) tokens with (batch, n) mask, '
                                f'got {tuple(x.shape)} / {tuple(mask.shape)}')
        m = mask.unsqueeze(-1).to(x.dtype)
        x = x + self.self_attn(self.norm1(x), mask) * m
        x = x + self._ff(self.norm2(x)) * m
        return x


class ReAttentionStack(nn.Module):
    """Transformer blocks in groups; after each group the encoded input is added back."""

    def __init__(self, dim, feedforward_dim, num_heads, num_blocks, group_size, enable_reattention=True,
                 reattention_source='input', layer_norm_eps=1e-5):
        super().__init__()
        if num_blocks % group_size != 0:
            raise ShapeMismatch(f'num_blocks {num_blocks} is not a multiple of group_size {group_size}')
        assert reattention_source in ('input', 'group')
        self.layers = nn.ModuleList([
            TransformerBlock(dim, feedforward_dim, num_heads, layer_norm_eps=layer_norm_eps)
            for _ in range(num_blocks)])
        self.group_size = group_size
        self.num_groups = num_blocks // group_size
        self.enable_reattention = enable_reattention
        self.reattention_source = reattention_source

    def forward(self, x, mask):
        x0 = x
        out = x
        groups = []
        for g in range(self.num_groups):
            group_input = out
            for layer in self.layers[g * self.group_size:(g + 1) * self.group_size]:
                out = layer(out, mask)
            if self.enable_reattention:
                out = out + (x0 if self.reattention_source == 'input' else group_input)
            groups.append(out)
        return out, groups


def masked_mean(x, mask):
    """Mean over valid tokens; x: (batch, n, d), mask: (batch, n). Masked tokens never enter the sum."""
    mask = mask.to(torch.bool)
    if torch.any(mask.sum(dim=1) == 0):
        raise EmptySequence('Pooling with no valid tokens')
    return torch.stack([x[b][mask[b]].sum(dim=0) / int(mask[b].sum()) for b in range(x.shape[0])])


class PoseHead(nn.Module):
    """Residual block of three 1x1 convolutions, masked average pooling, 3-layer MLP."""

    def __init__(self, dim, out_dim, final_bias, activation='relu'):
        super().__init__()
        self.dim = dim
        self.out_dim = out_dim
        self.final_bias = tuple(final_bias)
        assert len(self.final_bias) == out_dim
        self.res_block = PointwiseCNN(dim, [dim, dim], dim, activation)
        self.mlp = MLP(dim, [dim, dim], out_dim, activation, final_bias_init=self.final_bias)
        self.reset_output()

    def reset_output(self):
        # untrained heads emit the constant final_bias
        final_layer = self.mlp.final_layer
        with torch.no_grad():
            final_layer.weight.zero_()
            final_layer.bias.copy_(torch.as_tensor(self.final_bias, dtype=final_layer.bias.dtype))

    def forward(self, x, mask):
        batch_size, n, dim = x.shape
        if dim != self.dim or mask.shape != (batch_size, n):
            raise ShapeMismatch(f'Pose head expects (batch, n, {self.dim}) tokens, got {tuple(x.shape)}')
        # [batch_size x dim x n x 1] so the 1x1 convolutions act per token
        h = x.transpose(1, 2).unsqueeze(-1)
        h = h + self.res_block(h)
        h = h.squeeze(-1).transpose(1, 2)
        pooled = masked_mean(h, mask)
        return self.mlp(pooled)
