"""Tests for scenario loading, validation and adversary injection."""

import json

import pytest

from scripts.coinprune.config import DEFAULT_SCENARIO_DIR as SCENARIOS
from scripts.coinprune.errors import ScenarioError
from scripts.coinprune.node import Misbehavior, Role
from scripts.coinprune.scenario import (
    JoinSpec,
    inject_adversary,
    list_presets,
    load_scenario,
    scenario_from_dict,
    validate_scenario,
)

BASE = {
    'nodes': [
        {'role': 'COINPRUNE_MINER', 'count': 4, 'mining_power': 1.0},
        {'role': 'COINPRUNE_FULL', 'count': 2},
    ],
    'joins': [{'kind': 'coinprune', 'height': 10}],
}


def _with(**fields):
    return {**BASE, **fields}


class TestValidation:
    def test_minimal_scenario_gets_defaults(self):
        scenario = scenario_from_dict(BASE)
        assert len(scenario.nodes) == 6
        assert scenario.pulse.delta_p == 64
        assert scenario.pulse.delta_r == 16
        assert scenario.pulse.k == 3
        assert scenario.total_power == 4.0
        assert scenario.joins == (JoinSpec('coinprune', height=10),)

    @pytest.mark.parametrize('data, path', [
        ({'nodes': []}, 'nodes'),
        (_with(nodes=[{'role': 'WIZARD'}]), 'nodes/0/role'),
        (_with(pulse={'delta_p': 1}), 'pulse/delta_p'),
        (_with(latency=[5]), 'latency'),
        (_with(joins=[{'kind': 'coinprune'}]), 'joins/0'),
        (_with(colour='blue'), '<root>'),
    ])
    def test_schema_errors_name_the_path(self, data, path):
        with pytest.raises(ScenarioError, match=f"at {path}:"):
            validate_scenario(data)

    def test_pulse_window_must_fit(self):
        with pytest.raises(ScenarioError, match='pulse'):
            scenario_from_dict(_with(pulse={'delta_p': 8, 'delta_r': 8, 'k': 1}))

    def test_needs_mining_power(self):
        with pytest.raises(ScenarioError, match='mining_power'):
            scenario_from_dict({'nodes': [{'role': 'COINPRUNE_FULL'}]})

    def test_adversary_miner_needs_misbehavior(self):
        data = _with(nodes=BASE['nodes'] + [{'role': 'ADVERSARY_MINER', 'mining_power': 1.0}])
        with pytest.raises(ScenarioError, match='misbehavior'):
            scenario_from_dict(data)

    def test_latency_order(self):
        with pytest.raises(ScenarioError, match='latency'):
            scenario_from_dict(_with(latency=[40, 5]))


class TestLoading:
    def test_json_and_yaml(self, tmp_path):
        json_path = tmp_path / 'one.json'
        json_path.write_text(json.dumps(_with(name='one', seed=4)))
        yaml_path = tmp_path / 'two.yaml'
        yaml_path.write_text(
            'name: two\nseed: 4\nnodes:\n  - role: COINPRUNE_MINER\n    count: 4\n    mining_power: 1.0\n'
            '  - role: COINPRUNE_FULL\n    count: 2\njoins:\n  - kind: coinprune\n    height: 10\n'
        )
        one, two = load_scenario(json_path), load_scenario(yaml_path)
        assert one.name == 'one' and two.name == 'two'
        assert one.nodes == two.nodes
        assert one.joins == two.joins

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError, match='not found'):
            load_scenario(tmp_path / 'missing.json')

    def test_unparseable_file(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{"nodes": [')
        with pytest.raises(ScenarioError, match='Cannot parse'):
            load_scenario(path)

    def test_empty_yaml(self, tmp_path):
        path = tmp_path / 'empty.yaml'
        path.write_text('')
        with pytest.raises(ScenarioError, match='not a mapping'):
            load_scenario(path)

    def test_presets_load(self):
        presets = list_presets(SCENARIOS)
        assert {p.stem for p in presets} >= {'honest', 'adversary', 'mixed', 'tamper', 'eclipse', 'mainnet'}
        for path in presets:
            load_scenario(path)

    def test_mainnet_preset_pulse(self):
        scenario = load_scenario(SCENARIOS / 'mainnet.yaml')
        assert (scenario.pulse.delta_p, scenario.pulse.delta_r, scenario.pulse.k) == (10000, 1000, 3)

    def test_list_presets_missing_directory(self, tmp_path):
        assert list_presets(tmp_path / 'nowhere') == []

    def test_with_seed(self):
        scenario = scenario_from_dict(BASE)
        assert scenario.with_seed(11).seed == 11
        assert scenario.with_seed(11).nodes == scenario.nodes

    def test_as_dict_is_json_ready(self):
        data = scenario_from_dict(_with(adversaries=[{'kind': 'INVALID_REAFFIRMER'}])).as_dict()
        assert json.loads(json.dumps(data)) == data
        assert data['nodes'][3]['misbehavior'] == 'INVALID_REAFFIRM'


class TestInjectAdversary:
    def test_invalid_reaffirmer_power_share(self):
        scenario = inject_adversary(scenario_from_dict(BASE), 'INVALID_REAFFIRMER', power_share=0.25)
        adversary = scenario.nodes[3]
        assert adversary.role is Role.ADVERSARY_MINER
        assert adversary.misbehavior is Misbehavior.INVALID_REAFFIRM
        assert adversary.mining_power / scenario.total_power == pytest.approx(0.25)

    def test_invalid_reaffirmer_needs_two_miners(self):
        scenario = scenario_from_dict({'nodes': [{'role': 'COINPRUNE_MINER', 'mining_power': 1.0}]})
        with pytest.raises(ScenarioError, match='two'):
            inject_adversary(scenario, 'INVALID_REAFFIRMER')

    def test_invalid_power_share(self):
        with pytest.raises(ScenarioError, match='power_share'):
            inject_adversary(scenario_from_dict(BASE), 'INVALID_REAFFIRMER', power_share=1.5)

    def test_chunk_tamperer_prefers_full_nodes(self):
        scenario = inject_adversary(scenario_from_dict(BASE), 'CHUNK_TAMPERER', count=3)
        tamperers = [i for i, spec in enumerate(scenario.nodes) if spec.misbehavior is Misbehavior.TAMPER_CHUNKS]
        assert tamperers == [0, 4, 5]

    def test_chunk_tamperer_not_enough_nodes(self):
        with pytest.raises(ScenarioError, match='CHUNK_TAMPERER'):
            inject_adversary(scenario_from_dict(BASE), 'CHUNK_TAMPERER', count=7)

    def test_eclipse_adds_servers_and_pins_joiner(self):
        scenario = inject_adversary(scenario_from_dict(BASE), 'ECLIPSE_NEIGHBORS', count=3)
        added = scenario.nodes[6:]
        assert len(added) == 3
        assert all(spec.misbehavior is Misbehavior.SERVE_INVALID for spec in added)
        assert scenario.joins[0].eclipse is True

    def test_eclipse_needs_coinprune_join(self):
        scenario = scenario_from_dict(_with(joins=[{'kind': 'legacy', 'height': 3}]))
        with pytest.raises(ScenarioError, match='join'):
            inject_adversary(scenario, 'ECLIPSE_NEIGHBORS')

    def test_unknown_kind(self):
        with pytest.raises(ScenarioError, match='Unknown adversary'):
            inject_adversary(scenario_from_dict(BASE), 'SELFISH_MINER')

    def test_adversaries_section_applies_in_order(self):
        data = _with(adversaries=[{'kind': 'CHUNK_TAMPERER'}, {'kind': 'ECLIPSE_NEIGHBORS', 'count': 2}])
        scenario = scenario_from_dict(data)
        assert scenario.nodes[4].misbehavior is Misbehavior.TAMPER_CHUNKS
        assert len(scenario.nodes) == 8
