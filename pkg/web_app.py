#!/usr/bin/env python3
"""
DiG desk - Web Application
Development server for the results viewer; use `gunicorn app:app` in production.
"""

import os

from app import app

if __name__ == "__main__":
    os.makedirs(app.config["RUNS_DIR"], exist_ok=True)
    app.run(host="0.0.0.0", port=int(os.environ.get("PORT", 5000)), debug=False)
