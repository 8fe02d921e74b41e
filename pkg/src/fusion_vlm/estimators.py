"""scikit-learn style front ends for the model and the caption filter."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import DecoderConfig, EncoderConfig, RunConfig, StageConfig, TrainConfig
from .data import EOS, ToySample
from .decoder import Group
from .filtering import FilterThresholds, HashedScorer, UnigramLM, default_lm, filter_caption
from .model import FusionModel, encode_sample, forward_sample
from .training import evaluate_ce, train_stage
from .validation import check_image, check_samples, check_texts

METRIC_COLUMNS = ("alnum_ratio", "special_ratio", "char_rep_ratio", "word_rep_ratio",
                  "flagged_ratio", "perplexity")


class FusionVLM(BaseEstimator):
    """Fit the toy vision-language model on dialogues and answer questions.

    ``fit`` takes a list of :class:`ToySample`; ``predict`` returns, per
    sample, the greedy answer to each question (earlier generated answers
    become the context of later turns).
    """

    def __init__(self, encoder_layers=4, vision_dim=16, text_dim=32, patch_grid=4, image_size=16,
                 decoder_layers=4, vocab_size=64, window=3, latent_counts=(4, 16, 64, 144, 256),
                 loss_lambda=0.1, peak_lr=6e-3, batch_size=8, steps=500, stage="stage2",
                 max_answer_len=24, random_state=0):
        self.encoder_layers = encoder_layers
        self.vision_dim = vision_dim
        self.text_dim = text_dim
        self.patch_grid = patch_grid
        self.image_size = image_size
        self.decoder_layers = decoder_layers
        self.vocab_size = vocab_size
        self.window = window
        self.latent_counts = latent_counts
        self.loss_lambda = loss_lambda
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.steps = steps
        self.stage = stage
        self.max_answer_len = max_answer_len
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        enc = EncoderConfig(num_layers=self.encoder_layers, vision_dim=self.vision_dim,
                            text_dim=self.text_dim, patch_grid=self.patch_grid, image_size=self.image_size)
        dec = DecoderConfig(num_layers=self.decoder_layers, model_dim=self.text_dim,
                            vocab_size=self.vocab_size, window=self.window, latent_counts=self.latent_counts)
        return RunConfig(seed=self.random_state, encoder=enc, decoder=dec,
                         train=TrainConfig(loss_lambda=self.loss_lambda))

    def fit(self, X, y=None):
        samples = check_samples(X, self.image_size)
        cfg = self._run_config()
        self.model_ = FusionModel(cfg.encoder, cfg.decoder, seed=self.random_state)
        stage = StageConfig(self.stage, peak_lr=self.peak_lr, batch_size=self.batch_size, steps=self.steps)
        state, _ = train_stage(self.model_, samples, stage, self.steps, cfg)
        self.history_ = state.history
        return self

    def score(self, X, y=None, latent_count: int = 4) -> float:
        """Negative mean answer cross-entropy (higher is better)."""
        check_is_fitted(self, "model_")
        return -evaluate_ce(self.model_, check_samples(X, self.image_size), latent_count)

    @torch.no_grad()
    def predict(self, X, latent_count: int = 4) -> list[list[str]]:
        check_is_fitted(self, "model_")
        model = self.model_
        model.eval()
        out = []
        for sample in check_samples(X, self.image_size):
            answers: list[str] = []
            for t in range(len(sample.turns)):
                turns = [(q, a) for (q, _), a in zip(sample.turns[:t], answers)] + [(sample.turns[t][0], "")]
                enc = encode_sample(ToySample(sample.image, turns), model)
                ids: list[int] = []
                for _ in range(self.max_answer_len):
                    enc.groups[-1] = Group(enc.groups[-1].question, ids + [EOS])
                    res = forward_sample(model, enc, latent_count, lam=self.loss_lambda)
                    nxt = int(res.logits[res.sequence.answer_spans[-1].start + len(ids) - 1].argmax())
                    if nxt == EOS:
                        break
                    ids.append(nxt)
                answers.append(model.tokenizer.decode(ids))
            out.append(answers)
        return out


class CaptionFilter(TransformerMixin, BaseEstimator):
    """Rule-based caption filter.

    ``fit`` optionally builds the unigram language model from the captions
    themselves (``fit_lm=True``); otherwise the bundled common-word model is
    used.  ``transform`` returns the rule metrics as an array with columns
    :data:`METRIC_COLUMNS`; ``predict`` returns keep (True) / reject (False).
    """

    def __init__(self, thresholds: FilterThresholds | None = None, fit_lm: bool = False):
        self.thresholds = thresholds
        self.fit_lm = fit_lm

    def fit(self, X, y=None):
        texts = check_texts(X)
        self.lm_: UnigramLM = UnigramLM.from_corpus(texts) if self.fit_lm else default_lm()
        self.thresholds_ = self.thresholds or FilterThresholds()
        return self

    def _results(self, X, images=None):
        check_is_fitted(self, "lm_")
        texts = check_texts(X)
        images = [None] * len(texts) if images is None else [check_image(im) for im in images]
        scorer = HashedScorer()
        return [filter_caption(t, im, self.thresholds_, scorer=scorer, lm=self.lm_)
                for t, im in zip(texts, images)]

    def transform(self, X):
        return np.array([[r.metrics[c] for c in METRIC_COLUMNS] for r in self._results(X)])

    def predict(self, X, images=None):
        return np.array([r.keep for r in self._results(X, images)])

    def reasons(self, X, images=None) -> list[list[str]]:
        return [r.reasons for r in self._results(X, images)]
