from datetime import timedelta
from temporalio import workflow
from temporalio.common import RetryPolicy

with workflow.unsafe.imports_passed_through():
    from activities import (
        EvaluationRequest,
        PhaseRequest,
        TrainingRequest,
        evaluate_checkpoint,
        run_training_phase,
    )


@workflow.defn
class TrainCodecWorkflow:
    def __init__(self):
        self.phase: str = "pending"

    @workflow.query
    def current_phase(self) -> str:
        """Which stage the run is in: pending, a phase name, evaluation or complete."""
        return self.phase

    @workflow.run
    async def run(self, request: TrainingRequest) -> str:
        """
        Reconstruction phase → adversarial phase (if enabled) → evaluation
        """
        retry_policy = RetryPolicy(
            maximum_attempts=3,
            initial_interval=timedelta(seconds=1),
            maximum_interval=timedelta(seconds=10),
        )

        # Step 1: reconstruction-only training
        self.phase = "reconstruction"
        result = await workflow.execute_activity(
            run_training_phase,
            PhaseRequest("reconstruction", request.config_path, request.out_dir),
            start_to_close_timeout=timedelta(hours=2),
            retry_policy=retry_policy,
        )
        workflow.logger.info(f"✓ Reconstruction phase: step {result.global_step}, {result.checkpoint}")

        # Step 2: frozen encoder/quantizers + discriminators, resumed from phase 1
        if request.adversarial:
            self.phase = "adversarial"
            result = await workflow.execute_activity(
                run_training_phase,
                PhaseRequest("adversarial", request.config_path, request.out_dir, resume=result.checkpoint),
                start_to_close_timeout=timedelta(hours=2),
                retry_policy=retry_policy,
            )
            workflow.logger.info(f"✓ Adversarial phase: step {result.global_step}, {result.checkpoint}")

        # Step 3: held-out evaluation
        reports: list[str] = []
        if request.evaluate:
            self.phase = "evaluation"
            reports = await workflow.execute_activity(
                evaluate_checkpoint,
                EvaluationRequest(result.checkpoint, f"{request.out_dir}/reports", request.eval_count,
                                  request.eval_seed),
                start_to_close_timeout=timedelta(hours=1),
                retry_policy=retry_policy,
            )

        self.phase = "complete"
        workflow.logger.info(f"\n{'='*60}\n[WORKFLOW COMPLETE] ✅ {result.checkpoint}\n{'='*60}\n")
        return f"Trained {result.checkpoint} ({result.global_step} steps, {len(reports)} report files)"
