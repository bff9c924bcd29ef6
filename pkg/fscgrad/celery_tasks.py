"""Celery worker entry point for per-seed rollouts.

    celery -A fscgrad.celery_tasks worker -Q rollouts
"""
import logging

from celery import Celery

from fscgrad.runner import seed_job

logger = logging.getLogger(__name__)

app = Celery("fscgrad")
app.config_from_object("fscgrad.celeryconfig")


@app.task(name="fscgrad.celery_tasks.run_seed_job")
def run_seed_job(cfg_data, index, theta):
    """Simulate one trajectory and return every configured estimate for it."""
    try:
        result = seed_job(cfg_data, index, theta)
        logger.info(f"✅ Seed job {index} finished")
        return result
    except Exception as e:
        logger.error(f"❌ Seed job {index} failed: {e}")
        raise
