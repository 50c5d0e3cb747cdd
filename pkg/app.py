from flask import Flask, request, jsonify
from flask_cors import CORS
import os
import tempfile
import traceback
from datetime import datetime
import logging
from functools import lru_cache

import numpy as np

from config import TOOLKIT_VERSION, get_checkpoint_path, get_log_level
from errors import TensegrityError, TensegrityIOError
from geometry import canonical_group
from graphdata import N_ENDCAPS, read_contact_predictions, read_dataset
from training import load_checkpoint, predict_sequence
from inekf import load_ground_truth, run_estimator
from visualization import TensegrityVisualization

# Configure logging
logging.basicConfig(level=get_log_level())
logger = logging.getLogger(__name__)

app = Flask(__name__)
CORS(app)

visualization = TensegrityVisualization()

MAX_UPLOAD_BYTES = 50 * 1024 * 1024  # 50MB per file

SERVICE_INFO = {
    "service": "Tensegrity contact estimation",
    "status": "running",
    "endpoints": {
        "health": "/health",
        "group": "/api/group (GET)",
        "predict": "/api/predict (POST with dataset.csv)",
        "estimate": "/api/estimate (POST with dataset.csv, optional contacts.csv and ground_truth.csv)",
    },
    "version": TOOLKIT_VERSION,
}


@lru_cache(maxsize=2)
def _load_model(path: str, modified: float):
    return load_checkpoint(path)


def _model():
    path = get_checkpoint_path()
    if not path:
        raise TensegrityIOError("no checkpoint configured; set TENSEGRITY_CHECKPOINT")
    if not os.path.exists(path):
        raise TensegrityIOError(f"checkpoint not found: {path}")
    return _load_model(path, os.path.getmtime(path))


def _save_uploads(names, temp_files):
    """Write the named multipart uploads to temporary files; returns name -> path"""
    saved = {}
    for name in names:
        upload = request.files.get(name)
        if upload is None:
            continue
        if upload.content_length and upload.content_length > MAX_UPLOAD_BYTES:
            raise TensegrityIOError(f"{name} too large (max 50MB)")
        temp_file = tempfile.NamedTemporaryFile(delete=False, suffix=f"_{name}")
        temp_file.close()
        upload.save(temp_file.name)
        temp_files.append(temp_file.name)
        saved[name] = temp_file.name
        logger.info(f"Saved uploaded file: {name}")
    return saved


def _cleanup(temp_files):
    for temp_file in temp_files:
        try:
            os.unlink(temp_file)
        except Exception as e:
            logger.error(f"Error cleaning up temp file {temp_file}: {str(e)}")


def _internal_error(e: Exception):
    logger.error(f"Error processing request: {str(e)}")
    logger.error(traceback.format_exc())
    return jsonify({
        "error": "internal",
        "message": str(e),
        "timestamp": datetime.now().isoformat()
    }), 500


@app.route('/', methods=['GET'])
def root():
    """Root endpoint providing API information"""
    return jsonify(SERVICE_INFO)


@app.route('/health', methods=['GET'])
def health_check():
    """Health check endpoint"""
    return jsonify({"status": "healthy", "timestamp": datetime.now().isoformat()})


@app.route('/api/group', methods=['GET'])
def group():
    """D3 elements as endcap/rod/tendon permutations plus the composition table"""
    try:
        d3 = canonical_group()
        return jsonify({
            "labels": [g.label for g in d3],
            "composition_table": d3.composition_table(),
            "elements": {g.label: {"endcap_perm": list(g.endcap_perm), "rod_perm": list(g.rod_perm),
                                   "tendon_perm": list(g.tendon_perm), "is_flip": g.is_flip}
                         for g in d3},
        })
    except TensegrityError as e:
        return jsonify(e.to_dict()), 400
    except Exception as e:
        return _internal_error(e)


@app.route('/api/predict', methods=['POST'])
def predict():
    """Per-row contact predictions with warmup flags for an uploaded dataset.csv"""
    start_time = datetime.now()
    temp_files = []

    try:
        if 'dataset.csv' not in request.files:
            return jsonify({"error": "dataset.csv file is required"}), 400

        uploads = _save_uploads(['dataset.csv'], temp_files)
        params, config = _model()
        seq = read_dataset(uploads['dataset.csv'])
        frame = predict_sequence(params, seq, config.symmetry_enabled, config.threshold,
                                 batch_size=config.batch_size)

        processing_time = (datetime.now() - start_time).total_seconds()
        logger.info(f"Predicted {len(frame)} rows in {processing_time:.2f} seconds")
        return jsonify({
            "rows": len(frame),
            "history_length": params.L,
            "columns": list(frame.columns),
            "predictions": frame.to_numpy().tolist(),
        })

    except TensegrityError as e:
        logger.warning(f"Rejected prediction request: {e}")
        return jsonify(e.to_dict()), 400
    except Exception as e:
        return _internal_error(e)
    finally:
        _cleanup(temp_files)


@app.route('/api/estimate', methods=['POST'])
def estimate():
    """Run the contact-aided filter over an uploaded dataset.csv"""
    start_time = datetime.now()
    temp_files = []

    try:
        if 'dataset.csv' not in request.files:
            return jsonify({"error": "dataset.csv file is required"}), 400

        uploads = _save_uploads(['dataset.csv', 'contacts.csv', 'ground_truth.csv'], temp_files)
        seq = read_dataset(uploads['dataset.csv'])
        if 'contacts.csv' in uploads:
            contacts, source = read_contact_predictions(uploads['contacts.csv']), "uploaded"
        elif seq.labeled:
            contacts, source = seq.contacts, "dataset"
        else:
            contacts, source = np.zeros((len(seq), N_ENDCAPS), dtype=np.int8), "none"

        truth = load_ground_truth(uploads['ground_truth.csv']) if 'ground_truth.csv' in uploads else None
        run = run_estimator(seq, contacts, ground_truth=truth)
        plot = visualization.plot_trajectory(run.positions, None if truth is None else truth.positions)

        processing_time = (datetime.now() - start_time).total_seconds()
        logger.info(f"Estimated {len(seq)} steps in {processing_time:.2f} seconds")
        return jsonify({
            "steps": len(seq),
            "contacts_source": source,
            "final_position": run.positions[-1].tolist(),
            "final_quaternion_wxyz": run.quaternions_wxyz[-1].tolist(),
            "final_velocity": run.velocities[-1].tolist(),
            "drift_percent": run.drift_percent,
            "plot": plot,
        })

    except TensegrityError as e:
        logger.warning(f"Rejected estimation request: {e}")
        return jsonify(e.to_dict()), 400
    except Exception as e:
        return _internal_error(e)
    finally:
        _cleanup(temp_files)


if __name__ == '__main__':
    port = int(os.environ.get('PORT', 5000))
    app.run(host='0.0.0.0', port=port, debug=False)
