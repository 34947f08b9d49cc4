# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import json
from pathlib import Path

import pydantic
import pytest

from lib.config import (
    FOREGROUND_CMD_ENV,
    AnalyticBackendConfig,
    CleanConfig,
    DeltaDenoConfig,
    ForegroundConfig,
    PromptConfig,
    SyntheticBackendConfig,
    dump_config,
    load_config,
)


def test_defaults():
    cfg = DeltaDenoConfig()

    assert cfg.num_steps == 100
    assert cfg.gamma == 0.3
    assert cfg.tau_mid == 0.6
    assert cfg.tau_final == 0.35
    assert cfg.beta == 2.0
    assert cfg.guidance_scale == 7.5
    assert cfg.eta == 0.0
    assert cfg.refine.num_iters == 10
    assert cfg.refine.refine_lr == 1e-2
    assert cfg.refine.lam == 0.1
    assert cfg.refine.eta == 1.0
    assert cfg.clean == CleanConfig(kernel=3, min_component=4)
    assert cfg.inpaint and cfg.attention_bias and cfg.blend_normal
    assert cfg.layer_filter == []
    assert isinstance(cfg.backend, SyntheticBackendConfig)


def test_prompt_templates():
    prompts = PromptConfig(object_name='capsule', anomaly='scratch')

    assert prompts.normal_prompt() == 'a photo of a capsule'
    assert prompts.anomaly_prompt() == 'a photo of a capsule with scratch'
    assert prompts.descriptor_prompt() == 'scratch'

    detailed = prompts.model_copy(update={'descriptor': 'thin jagged scratch'})
    assert detailed.descriptor_prompt() == 'thin jagged scratch'
    assert detailed.anomaly_prompt() == prompts.anomaly_prompt()


@pytest.mark.parametrize('field, value', [
    ('gamma', 0.0),
    ('gamma', 1.5),
    ('tau_mid', 1.2),
    ('tau_final', -0.1),
    ('beta', -1.0),
    ('eta', 2.0),
    ('num_steps', 1),
    ('workers', 0),
    ('samples_per_image', 0),
    ('seed_mode', 'random'),
])
def test_out_of_range_rejected(field, value):
    with pytest.raises(pydantic.ValidationError):
        DeltaDenoConfig.model_validate({field: value})


def test_unknown_keys_rejected():
    with pytest.raises(pydantic.ValidationError):
        DeltaDenoConfig.model_validate({'gama': 0.3})
    with pytest.raises(pydantic.ValidationError):
        DeltaDenoConfig.model_validate({'refine': {'steps': 3}})


def test_even_kernel_rejected():
    with pytest.raises(pydantic.ValidationError):
        CleanConfig(kernel=4)


def test_backend_discriminator():
    cfg = DeltaDenoConfig.model_validate({
        'backend': {
            'kind': 'analytic',
            'means': {'a photo of a bottle': 'normal.f32'},
            'unconditional_mean': 'normal.f32',
        },
    })

    assert isinstance(cfg.backend, AnalyticBackendConfig)

    with pytest.raises(pydantic.ValidationError):
        DeltaDenoConfig.model_validate({'backend': {'kind': 'unknown'}})


def test_load_json_resolves_relative_paths(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({
        'gamma': 0.5,
        'foreground': {'mask': 'masks/fg.png'},
        'backend': {
            'kind': 'analytic',
            'means': {'a photo of a bottle': 'means/normal.f32'},
            'unconditional_mean': '/abs/normal.f32',
        },
    }))

    cfg = load_config(path)

    assert cfg.gamma == 0.5
    assert cfg.foreground.mask == tmp_path.absolute() / 'masks' / 'fg.png'
    assert cfg.backend.means['a photo of a bottle'] == tmp_path.absolute() / 'means' / 'normal.f32'
    assert cfg.backend.unconditional_mean == Path('/abs/normal.f32')


def test_load_toml(tmp_path):
    path = tmp_path / 'run.toml'
    path.write_text(
        'num_steps = 50\n'
        'tau_final = 0.4\n'
        '\n'
        '[refine]\n'
        'num_iters = 3\n'
        '\n'
        '[prompts]\n'
        'object_name = "screw"\n'
    )

    cfg = load_config(path)

    assert cfg.num_steps == 50
    assert cfg.tau_final == 0.4
    assert cfg.refine.num_iters == 3
    assert cfg.prompts.normal_prompt() == 'a photo of a screw'


def test_load_unknown_format(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text('gamma: 0.3\n')

    with pytest.raises(ValueError):
        load_config(path)


@pytest.mark.parametrize('suffix', ['.json', '.toml'])
def test_dump_then_load(tmp_path, suffix):
    cfg = DeltaDenoConfig(
        gamma=0.5,
        seed=7,
        layer_filter=['up_blocks'],
        prompts=PromptConfig(anomaly_tokens=['crack']),
        foreground=ForegroundConfig(mask=tmp_path / 'fg.png'),
        out_dir=tmp_path / 'out',
    )
    path = tmp_path / f'run{suffix}'

    dump_config(cfg, path)

    assert load_config(path) == cfg


def test_foreground_command_precedence(monkeypatch):
    assert ForegroundConfig().resolve_command() is None

    monkeypatch.setenv(FOREGROUND_CMD_ENV, 'rembg-mask --model "u2 net"')
    assert ForegroundConfig().resolve_command() == ['rembg-mask', '--model', 'u2 net']

    explicit = ForegroundConfig(command=['segment'])
    assert explicit.resolve_command() == ['segment']
