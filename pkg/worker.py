import asyncio
import logging
import os
from dotenv import load_dotenv
from temporalio.client import Client
from temporalio.worker import Worker
from workflow import TrainCodecWorkflow
from activities import (
    evaluate_checkpoint,
    run_training_phase,
)

TASK_QUEUE = "codec-training-queue"

# Configure logging to see activity logs in terminal
logging.basicConfig(
    level=logging.INFO,
    format='%(levelname)s:%(name)s: %(message)s'
)

# Reduce noise from third-party libraries
logging.getLogger('matplotlib').setLevel(logging.WARNING)
logging.getLogger('numba').setLevel(logging.WARNING)
logging.getLogger('temporalio.worker._workflow_instance').setLevel(logging.WARNING)


async def connect() -> Client:
    """Temporal connection from .env; TEMPORAL_TLS=false for a local dev server."""
    load_dotenv()
    return await Client.connect(
        os.getenv("TEMPORAL_ADDRESS", "localhost:7233"),
        namespace=os.getenv("TEMPORAL_NAMESPACE", "default"),
        api_key=os.getenv("TEMPORAL_API_KEY") or None,
        tls=os.getenv("TEMPORAL_TLS", "true").lower() != "false",
    )


async def main():
    client = await connect()

    # Create worker
    worker = Worker(
        client,
        task_queue=TASK_QUEUE,
        workflows=[TrainCodecWorkflow],
        activities=[
            run_training_phase,
            evaluate_checkpoint,
        ],
    )

    print("🚀 Worker started. Waiting for training runs...")
    await worker.run()


if __name__ == "__main__":
    asyncio.run(main())
