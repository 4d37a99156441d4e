import argparse
import os
import sys

import torch
import wandb

import config as config_lib
import evaluation
import formats
import simulator
import trainer
from errors import MarepoError

USAGE_ERROR = 1


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f'{self.prog}: error: {message}\n')


def build_parser():
    parser = ArgumentParser(prog='marepo', description='Map-relative pose regression on scene coordinate maps')
    parser.add_argument('--wandb', type=str, default='disabled', choices=('disabled', 'offline', 'online'))
    parser.add_argument('--project', type=str, default=None)
    parser.add_argument('--group', type=str, default=None)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='generate a synthetic dataset')
    p.add_argument('--spec', type=str, required=True, help='key=value scene file (sim_* keys)')
    p.add_argument('--out', type=str, required=True)

    p = sub.add_parser('train', help='train a regressor on the mapping split')
    p.add_argument('--data', type=str, required=True)
    p.add_argument('--config', type=str, required=True)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--log', type=str, default=None, help='metrics CSV (default: next to the checkpoint)')
    p.add_argument('--seed', type=int, default=None)

    p = sub.add_parser('finetune', help='scene-specific fine-tuning on the mapping split')
    p.add_argument('--ckpt', type=str, required=True)
    p.add_argument('--data', type=str, required=True)
    p.add_argument('--epochs', type=int, default=2)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--log', type=str, default=None)

    p = sub.add_parser('localize', help='print the pose of a single frame')
    p.add_argument('--ckpt', type=str, required=True)
    p.add_argument('--scm', type=str, required=True)
    p.add_argument('--intrinsics', type=str, required=True)

    p = sub.add_parser('evaluate', help='evaluate a checkpoint on the query split')
    p.add_argument('--ckpt', type=str, required=True)
    p.add_argument('--data', type=str, required=True)
    p.add_argument('--out', type=str, required=True)

    p = sub.add_parser('oracle', help='evaluate RANSAC PnP on the query split')
    p.add_argument('--data', type=str, required=True)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--config', type=str, default=None)
    p.add_argument('--dump', type=str, default=None, help='directory for per-frame correspondence files')

    p = sub.add_parser('noise-exp', help='accuracy under injected scene coordinate noise')
    p.add_argument('--ckpt', type=str, required=True)
    p.add_argument('--data', type=str, required=True)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--config', type=str, default=None, help='eval_* settings; model keys come from the checkpoint')

    p = sub.add_parser('ablate', help='train and evaluate the architectural variants')
    p.add_argument('--data', type=str, required=True)
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--config', type=str, default=None)
    p.add_argument('--seeds', type=int, default=1, help='number of seeds per variant')
    p.add_argument('--sizes', action='store_true', default=False, help='add the block-count variants')
    p.add_argument('--extras', action='store_true', default=False,
                   help='add the auxiliary-loss and 9D rotation variants')
    return parser


def load_config(path):
    return config_lib.get_config('default') if path is None else config_lib.load_config_file(path)


def with_model_keys(config, model):
    return config_lib.get_config('default', dict(config, **config_lib.model_config(model.config)))


def init_wandb(args, config):
    wandb.init(config=config, project=args.project or config['wandb_project'],
               group=args.group or config['wandb_group'], mode=args.wandb)


def cmd_simulate(args):
    config = config_lib.load_config_file(args.spec)
    spec = simulator.SceneSpec.from_config(config)
    names = simulator.make_dataset(spec, args.out)
    print(f'Wrote {len(names)} frames to {args.out}', file=sys.stderr)


def cmd_train(args):
    config = config_lib.load_config_file(args.config)
    init_wandb(args, config)
    log = args.log if args.log is not None else os.path.splitext(args.out)[0] + '_log.csv'
    trainer.train(args.data, config, seed=args.seed, log_path=log, out=args.out)


def cmd_finetune(args):
    model = formats.load_checkpoint(args.ckpt)
    init_wandb(args, model.config)
    model = trainer.finetune(model, args.data, epochs=args.epochs, log_path=args.log)
    formats.save_checkpoint(args.out, model)


def cmd_localize(args):
    model = formats.load_checkpoint(args.ckpt)
    scm = formats.read_scm(args.scm)
    K = formats.read_intrinsics(args.intrinsics)
    pose = model.localize(scm, K)
    sys.stdout.write(formats.format_pose(pose))


def cmd_evaluate(args):
    model = formats.load_checkpoint(args.ckpt)
    report = evaluation.evaluate(model, args.data, args.out)
    print_summary(report)


def cmd_oracle(args):
    config = load_config(args.config)
    report = evaluation.evaluate_oracle(args.data, config, args.out, dump_dir=args.dump)
    print_summary(report)


def cmd_noise_exp(args):
    model = formats.load_checkpoint(args.ckpt)
    config = with_model_keys(load_config(args.config), model)
    evaluation.noise_experiment(model, args.data, args.out, config=config)


def cmd_ablate(args):
    config = load_config(args.config)
    init_wandb(args, config)
    evaluation.ablate(args.data, config, args.out, seeds=tuple(range(args.seeds)), sizes=args.sizes,
                      extras=args.extras)


def print_summary(report):
    for key, value in report.summary().items():
        print(f'{key}: {value}', file=sys.stderr)


COMMANDS = {
    'simulate': cmd_simulate,
    'train': cmd_train,
    'finetune': cmd_finetune,
    'localize': cmd_localize,
    'evaluate': cmd_evaluate,
    'oracle': cmd_oracle,
    'noise-exp': cmd_noise_exp,
    'ablate': cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    threads = os.environ.get('MAREPO_THREADS')
    if threads:
        torch.set_num_threads(max(1, int(threads)))

    try:
        COMMANDS[args.command](args)
    except MarepoError as e:
        print(f'error: {type(e).__name__}: {e}', file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # invalid values in otherwise well-formed inputs
        print(f'error: {e}', file=sys.stderr)
        return 2
    finally:
        if wandb.run is not None:
            wandb.finish()
    return 0


if __name__ == '__main__':
    sys.exit(main())
