from copy import deepcopy

from errors import ConfigError

CONFIGS = {}

CONFIGS['default'] = {
    # encoding
    'model_d_model': 32,
    'model_pe3d_bands': 5,
    'model_enable_dynamic_pe': True,

    # transformer
    'model_n_heads': 4,
    'model_n_blocks': 12,
    'model_group_size': 4,
    'model_ffn_dim': 64,
    'model_enable_reattention': True,
    'model_reattention_source': 'input',  # 'input' re-injects x0, 'group' re-injects each group's input
    'model_layer_norm_eps': 1e-5,

    # pose head
    'model_head_act': 'relu',
    'model_rotation_repr': '6d',
    'model_aux_losses': True,

    # optimizer
    'optim_lr_min': 3e-4,
    'optim_lr_max': 2e-3,
    'optim_beta1': 0.9,
    'optim_beta2': 0.999,
    'optim_eps': 1e-8,
    'optim_wd': 1e-2,
    'optim_grad_clip': 0.0,
    'optim_finetune_lr_div': 10.0,

    # training
    'train_epochs': 200,
    'train_batch_size': 16,
    'train_finetune_epochs': 2,
    'train_val_every': 1,
    'train_seed': 0,

    # online augmentation
    'aug_jitter_trans': 1.0,
    'aug_jitter_rot': 180.0,

    # evaluation
    'eval_batch_size': 32,
    'eval_noise_threshold': 0.10,
    'eval_noise_magnitudes': (0.10, 0.50),
    'eval_noise_fractions': (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    'eval_seed': 0,

    # oracle
    'ransac_threshold': 2.0,
    'ransac_max_iters': 1000,
    'ransac_confidence': 0.999,
    'ransac_seed': 0,
    'ransac_refine_iters': 20,
    'ransac_max_corrs': 2000,

    # simulator
    'sim_seed': 0,
    'sim_extent': (4.0, 4.0, 4.0),
    'sim_surface': 'heightfield',  # 'heightfield' or 'room'
    'sim_n_map': 300,
    'sim_n_query': 100,
    'sim_h': 60,
    'sim_w': 80,
    'sim_randomize_k': True,
    'sim_focal': 600.0,  # at 640 pixels image width, used when sim_randomize_k is off
    'sim_variants': 0,  # extra rotated / rescaled / cropped renders per mapping frame

    # logging
    'wandb_project': None,
    'wandb_group': None,
}

CONFIGS['tiny'] = dict(CONFIGS['default'], **{
    'model_d_model': 16,
    'model_n_heads': 2,
    'model_n_blocks': 4,
    'model_group_size': 2,
    'model_ffn_dim': 32,
    'train_epochs': 5,
    'train_batch_size': 4,
    'sim_n_map': 12,
    'sim_n_query': 4,
    'sim_h': 12,
    'sim_w': 16,
})

CONFIGS['ablation'] = dict(CONFIGS['default'], **{
    'model_d_model': 128,
    'model_n_heads': 8,
    'model_ffn_dim': 256,
    'train_epochs': 50,
})

CONFIGS['large'] = dict(CONFIGS['default'], **{
    'model_d_model': 256,
    'model_n_heads': 8,
    'model_ffn_dim': 512,
    'train_epochs': 150,
    'train_batch_size': 64,
})


def validate_config(config):
    def check(cond, msg):
        if not cond:
            raise ConfigError(msg)

    d = config['model_d_model']
    check(d > 0 and d % 4 == 0, f'model_d_model must be a positive multiple of 4, got {d}')
    check(d % config['model_n_heads'] == 0, 'model_d_model must be divisible by model_n_heads')
    check(config['model_pe3d_bands'] >= 1, 'model_pe3d_bands must be >= 1')
    check(config['model_group_size'] >= 1 and config['model_n_blocks'] % config['model_group_size'] == 0,
          'model_n_blocks must be a multiple of model_group_size')
    check(config['model_rotation_repr'] in ('6d', '9d'), 'model_rotation_repr must be 6d or 9d')
    check(config['model_reattention_source'] in ('input', 'group'),
          'model_reattention_source must be input or group')
    check(0 < config['optim_lr_min'] <= config['optim_lr_max'], 'need 0 < optim_lr_min <= optim_lr_max')
    check(0 < config['optim_beta1'] < 1 and 0 < config['optim_beta2'] < 1, 'betas must lie in (0, 1)')
    check(config['aug_jitter_trans'] >= 0 and config['aug_jitter_rot'] >= 0, 'jitter must be >= 0')
    check(config['train_batch_size'] >= 1 and config['train_epochs'] >= 0, 'invalid training budget')
    check(config['ransac_threshold'] > 0 and config['ransac_max_iters'] >= 1, 'invalid ransac settings')
    check(len(config['sim_extent']) == 3 and min(config['sim_extent']) > 0, 'sim_extent must be 3 positive sizes')
    check(config['sim_surface'] in ('heightfield', 'room'), 'sim_surface must be heightfield or room')
    check(config['sim_h'] >= 8 and config['sim_w'] >= 8, 'sim_h and sim_w must be >= 8')
    check(config['sim_n_map'] >= 1 and config['sim_n_query'] >= 1, 'frame counts must be >= 1')
    check(config['sim_variants'] >= 0, 'sim_variants must be >= 0')
    return config


def get_config(name='default', overrides=None):
    if name not in CONFIGS:
        raise ConfigError(f'Unknown preset: {name}')
    config = deepcopy(CONFIGS[name])
    if overrides:
        unknown = set(overrides) - set(config)
        if unknown:
            raise ConfigError(f'Unknown config keys: {sorted(unknown)}')
        config.update(overrides)
    return validate_config(config)


def parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if text.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.replace(',', ' ').split())
    except ValueError:
        raise ConfigError(f'Invalid value for {key}: {text!r}') from None
    if default is None and text.lower() in ('', 'none'):
        return None
    return text


def parse_key_values(lines, source='<config>'):
    pairs = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f'{source}:{lineno}: expected key=value, got {line!r}')
        key, value = line.split('=', 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config_file(path, preset='default'):
    try:
        with open(path, encoding='utf-8') as f:
            pairs = parse_key_values(f.read().splitlines(), source=str(path))
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f'Cannot read config file {path}: {e}') from e

    for key, value in pairs:
        if key == 'preset':
            preset = value
    if preset not in CONFIGS:
        raise ConfigError(f'Unknown preset: {preset}')
    base = CONFIGS[preset]
    overrides = {}
    for key, value in pairs:
        if key == 'preset':
            continue
        if key not in base:
            raise ConfigError(f'{path}: unknown config key {key!r}')
        overrides[key] = parse_value(key, value, base[key])
    return get_config(preset, overrides)


def format_config(config):
    def fmt(value):
        if isinstance(value, tuple):
            return ' '.join(repr(x) for x in value)
        if value is None:
            return 'none'
        return repr(value) if isinstance(value, float) else str(value)
    return ''.join(f'{key}={fmt(value)}\n' for key, value in sorted(config.items()))


def model_config(config):
    return {key: value for key, value in config.items() if key.startswith('model_')}
