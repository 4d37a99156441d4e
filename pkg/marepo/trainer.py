import copy
import os
import sys

import numpy as np
import torch
import wandb
from tqdm import tqdm

import formats
import utils
from dataset import AugmentConfig, PoseDataset
from errors import NonFiniteLoss
from geometry import Pose, pose_error
from regressor import count_params, init_params

LOG_HEADER = ('epoch', 'split', 'loss', 'median_trans_m', 'median_rot_deg')


def compute_gradients(model, batch):
    """Mean total loss over the batch and its gradient for every named parameter.

    Parameters that do not influence the loss (e.g. auxiliary heads with auxiliary losses
    disabled) get zero gradients.
    """
    coords, mask, intrinsics, R, t = batch
    if coords.shape[0] == 0:
        raise ValueError('Empty batch')
    names, params = zip(*model.named_parameters())
    preds = model(coords, mask, intrinsics, training=True)
    loss, metrics = model.compute_loss(preds, R, t)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = {name: torch.zeros_like(p) if g is None else g for name, p, g in zip(names, params, grads)}
    return loss.detach(), grads, preds, metrics


def gradients(model, batch):
    loss, grads, _, _ = compute_gradients(model, batch)
    return loss, grads


def batch_pose_errors(R_hat, t_hat, R, t):
    R_hat, t_hat, R, t = (x.detach().double().cpu().numpy() for x in (R_hat, t_hat, R, t))
    return [pose_error(Pose(R_hat[i], t_hat[i]), Pose(R[i], t[i])) for i in range(len(R))]


def summarize_errors(errors):
    return utils.median([e.trans_err for e in errors]), utils.median([e.rot_err for e in errors])


class Trainer:

    def __init__(self, config, dataset, model=None, seed=None, log_path=None, holdout=True):
        self.config = config
        self.seed = config['train_seed'] if seed is None else seed
        if holdout:
            self.train_set, self.val_set = dataset.split_validation()
        else:
            self.train_set, self.val_set = dataset, None
        self.model = init_params(config, self.seed) if model is None else model
        self.augment_cfg = AugmentConfig.from_config(config)
        self.log_path = log_path
        self.summarizer = utils.MetricsSummarizer()
        self.last_good_state = copy.deepcopy(self.model.state_dict())
        self.epoch = 0

    def print_stats(self):
        model = self.model
        print('# Parameters', file=sys.stderr)
        print('3D encoding:', count_params(model.pe3d), file=sys.stderr)
        print('Transformer:', count_params(model.transformer), file=sys.stderr)
        print('Pose heads:', count_params(model.heads), file=sys.stderr)
        print('Total:', count_params(model), file=sys.stderr)

    def _log(self, epoch, split, loss, errors):
        med_trans, med_rot = summarize_errors(errors)
        row = (epoch, split, float(loss), med_trans, med_rot)
        if self.log_path is not None:
            formats.append_csv(self.log_path, row)
        return row

    def run(self, epochs=None, lr=None):
        """Trains for `epochs` passes; a fixed `lr` replaces the one-cycle schedule."""
        config = self.config
        epochs = config['train_epochs'] if epochs is None else epochs
        batch_size = config['train_batch_size']
        num_batches = -(-len(self.train_set) // batch_size)
        model = self.model.train()
        optimizer = utils.AdamWOptim.from_config(model.parameters(), config, total_steps=epochs * num_batches, lr=lr)
        rng = utils.sample_rng(self.seed, 1)
        dtype = model.dtype

        if self.log_path is not None and not os.path.exists(self.log_path):
            formats.write_csv(self.log_path, LOG_HEADER, [])

        rows = []
        try:
            for epoch in tqdm(range(epochs), desc='Training', file=sys.stderr, disable=epochs == 0):
                self.epoch = epoch
                errors = []
                for idx in tqdm(self.train_set.sample_batches(batch_size, rng), desc='Epoch', leave=False,
                                file=sys.stderr):
                    batch = self.train_set.augmented_data(idx, self.augment_cfg, rng, dtype=dtype)
                    loss, grads, preds, metrics = compute_gradients(model, batch)
                    utils.adamw_step(model, grads, optimizer)
                    errors += batch_pose_errors(preds[-1]['R'], preds[-1]['t'], batch[3], batch[4])
                    utils.update_metrics(metrics, {'lr': optimizer.lr})
                    self.summarizer.append(metrics)

                summary = utils.to_scalars(self.summarizer.summarize())
                rows.append(self._log(epoch, 'train', summary['loss'], errors))
                self.last_good_state = copy.deepcopy(model.state_dict())

                log = {f'train/{key}': value for key, value in summary.items()}
                log.update({'train/median_trans_m': rows[-1][3], 'train/median_rot_deg': rows[-1][4]})
                if self.val_set is not None and (epoch + 1) % config['train_val_every'] == 0:
                    val_loss, val_errors = self.validate()
                    rows.append(self._log(epoch, 'val', val_loss, val_errors))
                    log.update({'val/loss': val_loss, 'val/median_trans_m': rows[-1][3],
                                'val/median_rot_deg': rows[-1][4]})
                if wandb.run is not None:
                    wandb.log(log)
        except NonFiniteLoss:
            print(f'Non-finite loss in epoch {self.epoch}, restoring last good parameters', file=sys.stderr)
            model.load_state_dict(self.last_good_state)
            raise
        finally:
            model.eval()
        return rows

    @torch.no_grad()
    def validate(self):
        model = self.model
        losses, errors = [], []
        batch_size = self.config['eval_batch_size']
        for start in range(0, len(self.val_set), batch_size):
            idx = np.arange(start, min(start + batch_size, len(self.val_set)))
            coords, mask, intrinsics, R, t = self.val_set.get_data(idx, dtype=model.dtype)
            preds = model(coords, mask, intrinsics, training=True)
            loss, _ = model.compute_loss(preds, R, t)
            losses.append(float(loss) * len(idx))
            errors += batch_pose_errors(preds[-1]['R'], preds[-1]['t'], R, t)
        return sum(losses) / len(self.val_set), errors


def train(data_dir, config, seed=None, log_path=None, out=None):
    dataset = PoseDataset.load(data_dir, 'mapping')
    trainer = Trainer(config, dataset, seed=seed, log_path=log_path)
    trainer.print_stats()
    try:
        rows = trainer.run()
    finally:
        if out is not None:
            formats.save_checkpoint(out, trainer.model)
    return trainer.model, rows


def finetune(model, data_dir, epochs=None, config=None, log_path=None):
    """Scene-specific fine-tuning at a fixed low learning rate over all mapping frames."""
    config = model.config if config is None else config
    epochs = config['train_finetune_epochs'] if epochs is None else epochs
    if epochs == 0:
        return model
    dataset = PoseDataset.load(data_dir, 'mapping')
    lr = config['optim_lr_max'] / config['optim_finetune_lr_div']
    trainer = Trainer(config, dataset, model=model, log_path=log_path, holdout=False)
    trainer.run(epochs=epochs, lr=lr)
    return trainer.model
