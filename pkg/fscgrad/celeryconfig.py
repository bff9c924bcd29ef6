# Celery configuration for seed fan-out workers
import os

from dotenv import load_dotenv

load_dotenv()

broker_url = os.getenv("CELERY_BROKER_URL", "redis://localhost:6379/0")
result_backend = os.getenv("CELERY_RESULT_BACKEND", "redis://localhost:6379/0")

# job arguments are a JSON config dump and a theta list
task_serializer = "json"
result_serializer = "json"
accept_content = ["json"]

task_routes = {
    "fscgrad.celery_tasks.run_seed_job": {"queue": "rollouts"},
}

# seed jobs are long and deterministic, so a redelivered job returns the same result
worker_prefetch_multiplier = 1
task_acks_late = True
