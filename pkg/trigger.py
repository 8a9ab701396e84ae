import asyncio
import hashlib
import sys
from pathlib import Path

from activities import TrainingRequest
from errors import CodecError
from trainer import TrainConfig
from worker import TASK_QUEUE, connect
from workflow import TrainCodecWorkflow


async def main():
    if len(sys.argv) < 3:
        print("Usage: python trigger.py <train_config.json> <out_dir> [--no-eval]")
        sys.exit(1)

    config_path, out_dir = sys.argv[1], sys.argv[2]
    try:
        config = TrainConfig.load(config_path)
    except CodecError as e:
        print(f"❌ {e}")
        sys.exit(e.exit_code)

    client = await connect()

    # one workflow id per (config, output directory)
    run_key = hashlib.sha256(f"{Path(config_path).resolve()}|{Path(out_dir).resolve()}".encode()).hexdigest()[:12]
    request = TrainingRequest(
        config_path=str(Path(config_path).resolve()),
        out_dir=str(Path(out_dir).resolve()),
        adversarial=config.adversarial,
        evaluate="--no-eval" not in sys.argv[3:],
        eval_seed=config.seed,
    )

    print(f"🚀 Starting training run: {config.preset}, seed {config.seed}")
    handle = await client.start_workflow(
        TrainCodecWorkflow.run,
        request,
        id=f"train-codec-{run_key}",
        task_queue=TASK_QUEUE,
    )
    print(f"📋 Workflow started: {handle.id}")

    print("\n⏳ Training...")
    result = await handle.result()
    print(f"✅ {result}")


if __name__ == "__main__":
    asyncio.run(main())
