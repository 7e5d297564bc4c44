import time

import pytest

from moss.config import Timings
from moss.core.models import ImageRef, TranscriptRole
from moss.errors import EmptyScores, IsolationViolation, WorkerSpawnFailed
from moss.hostd.runtime import ExecResult
from moss.trials.scoring import aggregate_scores
from moss.trials.workers import (
    TRIAL_NETWORK,
    TrialHost,
    TrialOutcome,
    TrialPlan,
    TrialTask,
    parse_trial_output,
    run_trials,
    scripted_trial_exec,
)

IMAGE = ImageRef(image_id="sim-candidate0001", built_from_rev="c0ffee")
TASKS = [TrialTask(task_id=t, prompt=f"please do {t}") for t in ("t1", "t2", "t3")]


@pytest.fixture
def host(runtime, store, fast_timings, tmp_path):
    return TrialHost(
        runtime,
        store,
        timings=fast_timings,
        user_state_volume=str(tmp_path / "user-state"),
        live_network="moss-live",
    )


def plan(trials_per_task: int = 2, workers_n: int = 2) -> TrialPlan:
    return TrialPlan(image=IMAGE, tasks=TASKS, trials_per_task=trials_per_task, workers_n=workers_n)


class TestRunTrials:
    async def test_every_pair_runs_once_and_workers_are_removed(self, host, runtime, store):
        runtime.exec_behaviors[("*", "moss-trial")] = scripted_trial_exec(
            {("*", "t1"): {"entries": [{"role": "tool", "content": "ok"}, {"role": "agent", "content": "done"}]}}
        )

        transcripts = await run_trials(plan(), host, store, "trials/run1/iter-1")

        assert [(t.task_id, t.trial_index) for t in transcripts] == [
            ("t1", 0), ("t1", 1), ("t2", 0), ("t2", 1), ("t3", 0), ("t3", 1),
        ]
        assert len({t.worker_id for t in transcripts}) <= 2
        assert runtime.containers(label="moss.role=trial-worker") == []
        assert store.exists("trials/run1/iter-1/t1/0.jsonl")
        index = store.read_json("trials/run1/iter-1/index.json")
        assert [row["task_id"] for row in index] == ["t1", "t1", "t2", "t2", "t3", "t3"]
        assert "entries" not in index[0]
        t1 = transcripts[0]
        assert [e.role for e in t1.entries] == [TranscriptRole.USER, TranscriptRole.TOOL, TranscriptRole.AGENT]
        assert t1.outcome == TrialOutcome.COMPLETED

    async def test_workers_are_isolated(self, host, runtime, store):
        seen = []

        def record(info, command):
            seen.append(info)
            return ExecResult(exit_code=0, output="ok")

        runtime.exec_behaviors[("*", "moss-trial")] = record

        await run_trials(plan(trials_per_task=1, workers_n=1), host, store, "trials/iso")

        assert seen
        for info in seen:
            assert info.networks == [TRIAL_NETWORK]
            assert host.user_state_volume not in info.mounts
            assert info.labels == {"moss.role": "trial-worker"}

    async def test_spawn_refuses_user_state_mount(self, host, runtime, tmp_path):
        host.worker_mounts = {str(tmp_path / "user-state"): "/user-state"}

        with pytest.raises(IsolationViolation, match="user-state volume"):
            await host.spawn(IMAGE.image_id)
        assert runtime.containers() == []

    async def test_spawn_refuses_live_network(self, host, runtime):
        host.worker_network = "moss-live"

        with pytest.raises(IsolationViolation, match="live network"):
            await host.spawn(IMAGE.image_id)

    async def test_spawn_failure_tears_down_started_workers(self, host, runtime, store):
        started = []
        original = host.spawn

        async def spawn_once(image_id):
            if started:
                raise WorkerSpawnFailed("no capacity")
            started.append(await original(image_id))
            return started[-1]

        host.spawn = spawn_once

        with pytest.raises(WorkerSpawnFailed):
            await run_trials(plan(), host, store, "trials/fail")
        assert runtime.inspect(started[0]) is None

    async def test_crashed_trials_are_errored(self, host, runtime, store):
        runtime.exec_behaviors[("*", "moss-trial")] = scripted_trial_exec({}, errors={("*", "t2")})

        transcripts = await run_trials(plan(trials_per_task=1, workers_n=1), host, store, "trials/err")

        outcomes = {t.task_id: t.outcome for t in transcripts}
        assert outcomes == {"t1": TrialOutcome.COMPLETED, "t2": TrialOutcome.ERRORED, "t3": TrialOutcome.COMPLETED}

    async def test_slow_trial_times_out(self, runtime, store, tmp_path):
        host = TrialHost(runtime, store, timings=Timings(trial_timeout=0.05), user_state_volume=str(tmp_path / "us"))

        def slow(info, command):
            time.sleep(0.3)
            return ExecResult(exit_code=0, output="late")

        runtime.exec_behaviors[("*", "moss-trial")] = slow
        worker = await host.spawn(IMAGE.image_id)

        transcript = await host.exec(worker, TASKS[0], 0, "trials/slow/t1/0.jsonl")

        assert transcript.outcome == TrialOutcome.TIMED_OUT
        assert [e.content for e in transcript.entries] == ["please do t1"]

    async def test_timed_out_trial_keeps_streamed_output(self, runtime, store, tmp_path):
        host = TrialHost(runtime, store, timings=Timings(trial_timeout=0.05), user_state_volume=str(tmp_path / "us"))

        def stalls_after_first_line(info, command):
            yield "checked the calendar"
            time.sleep(0.3)
            yield " and found the conflict"
            return 0

        runtime.exec_behaviors[("*", "moss-trial")] = stalls_after_first_line
        worker = await host.spawn(IMAGE.image_id)

        transcript = await host.exec(worker, TASKS[0], 0, "trials/stall/t1/0.jsonl")

        assert transcript.outcome == TrialOutcome.TIMED_OUT
        assert [e.content for e in transcript.entries] == ["please do t1", "checked the calendar"]
        assert store.read("trials/stall/t1/0.jsonl").count(b"\n") == 2

    def test_sweep_removes_only_trial_workers(self, host, runtime):
        runtime.start("moss-gateway", "moss-gateway:initial")
        runtime.start("wrk_old", IMAGE.image_id, labels={"moss.role": "trial-worker"})

        assert host.sweep() == ["wrk_old"]
        assert runtime.inspect("moss-gateway").running

    def test_plan_needs_workers_and_trials(self):
        with pytest.raises(ValueError):
            plan(trials_per_task=0)
        with pytest.raises(ValueError):
            plan(workers_n=0)


def test_parse_trial_output_plain_text():
    entries, outcome = parse_trial_output(TASKS[0], ExecResult(exit_code=2, output="it broke\n"))

    assert [(e.turn_index, e.role, e.content) for e in entries] == [
        (0, TranscriptRole.USER, "please do t1"),
        (1, TranscriptRole.AGENT, "it broke"),
    ]
    assert outcome == TrialOutcome.ERRORED


class TestScoring:
    BASELINE = {
        "T141zh": [0.3000, 0.3546],
        "T142": [0.2527, 0.2527],
        "T137zh": [0.2000, 0.2426],
        "T138": [0.2090, 0.2090],
    }
    ITERATION_1 = {
        "T141zh": [0.5000, 0.5660],
        "T142": [0.5453, 0.5453],
        "T137zh": [0.4000, 0.5134],
        "T138": [0.9049, 0.9049],
    }

    def test_baseline_scores(self):
        summary = aggregate_scores(self.BASELINE)

        assert summary.per_task_mean == {"T141zh": 0.3273, "T142": 0.2527, "T137zh": 0.2213, "T138": 0.2090}
        assert summary.overall_mean == pytest.approx(0.2526, abs=1e-4)

    def test_first_iteration_scores(self):
        summary = aggregate_scores(self.ITERATION_1)

        assert summary.per_task_mean == {"T141zh": 0.5330, "T142": 0.5453, "T137zh": 0.4567, "T138": 0.9049}
        assert summary.overall_mean == pytest.approx(0.6100, abs=1e-4)

    def test_empty_scores(self):
        with pytest.raises(EmptyScores):
            aggregate_scores({})
        with pytest.raises(EmptyScores, match="T142"):
            aggregate_scores({"T141zh": [0.3], "T142": []})
