"""
Django settings for the cortical parcellation project.

The project has no web surface: Django provides settings, the ORM run
registry and the management-command entry point.
"""

import os
from pathlib import Path

from dotenv import load_dotenv
import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / ".env")

SECRET_KEY = os.getenv(
    "DJANGO_SECRET_KEY",
    "django-insecure-parcellation-local-only",
)

DEBUG = os.getenv("DJANGO_DEBUG", "1") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'parcellation',
    'django.contrib.contenttypes',
]

MIDDLEWARE = []


# Database

DATABASES = {
    "default": dj_database_url.config(
        default=f"sqlite:///{BASE_DIR / 'db.sqlite3'}",
        conn_max_age=600,
    )
}


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging: human-readable on stderr; commands add a JSON-lines file handler
# in their output directory.
PARCELLATION_LOG_LEVEL = os.getenv("PARCELLATION_LOG_LEVEL", "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "console": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
        "json": {
            "()": "parcellation.logs.JsonFormatter",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "console",
        },
    },
    "loggers": {
        "parcellation": {
            "handlers": ["console"],
            "level": PARCELLATION_LOG_LEVEL,
            "propagate": False,
        },
    },
}


# Parcellation defaults
PARCELLATION_DATA_ROOT = Path(os.getenv("PARCELLATION_DATA_ROOT", BASE_DIR / "var"))

PARCELLATION = {
    # desk-scale training; larger presets live in pipeline.TRAIN_PRESETS
    "train": {
        "patch_size": 192,
        "batch_size": 8,
        "learning_rate": 0.05,
        "iterations": 3000,
        "phase1_iterations": 1500,
        "foreground_fraction": 0.85,
        "atlas_dropout": 0.2,
        "orientation": "laplace",
        "prefetch": 0,
        "log_every": 50,
        "seed": 0,
    },
    "laplace": {
        "omega": 1.9,
        "tol": 1e-6,
        "max_iter": 20000,
    },
    "tiling": {
        "core": 64,
        "overlap": 640,
    },
    "synthgen": {
        "size": 768,
        "areas": 6,
        "hidden_area_fraction": 0.3,
        "atlas_sigma": 3.0,
        "landmark_noise": 0.5,
    },
    "gmwm": {
        "subset_sections": 20,
        "background_weight": 0.5,
    },
}
