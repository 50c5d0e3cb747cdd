import matplotlib
matplotlib.use('Agg')  # Use non-interactive backend
import matplotlib.pyplot as plt
import seaborn as sns
import pandas as pd
import numpy as np
import networkx as nx
import base64
import io
import logging
from typing import Optional

logger = logging.getLogger(__name__)

# 1x1 white PNG, returned when even the placeholder figure cannot be drawn
BLANK_PNG = ("data:image/png;base64,iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mNkYPhf"
             "DwAChwGA60e6kgAAAABJRU5ErkJggg==")
NODE_COLORS = {"rod": "#d95f02", "tendon": "#7570b3", "endcap": "#1b9e77"}


class TensegrityVisualization:
    """Training curves, confusion heatmaps, trajectories and graph drawings"""

    def __init__(self):
        plt.style.use('default')
        sns.set_palette("husl")

        plt.rcParams['figure.dpi'] = 100
        plt.rcParams['savefig.dpi'] = 100
        plt.rcParams['font.size'] = 10
        plt.rcParams['axes.labelsize'] = 12
        plt.rcParams['axes.titlesize'] = 14
        plt.rcParams['legend.fontsize'] = 10

    def plot_training_history(self, history: pd.DataFrame, path: Optional[str] = None) -> str:
        """Loss and validation scores per epoch"""
        try:
            if history.empty:
                return self._create_placeholder_plot("No epochs recorded", path)

            fig, (loss_ax, score_ax) = plt.subplots(1, 2, figsize=(12, 5))
            loss_ax.plot(history['epoch'], history['train_loss'], marker='o', linewidth=2, markersize=4)
            loss_ax.set_xlabel('epoch')
            loss_ax.set_ylabel('train BCE loss')
            loss_ax.set_title('Training loss')
            loss_ax.grid(True, alpha=0.3)

            score_ax.plot(history['epoch'], history['val_accuracy'], marker='o', label='exact-match accuracy')
            score_ax.plot(history['epoch'], history['val_macro_f1'], marker='s', label='macro F1')
            score_ax.set_xlabel('epoch')
            score_ax.set_ylim(0.0, 1.05)
            score_ax.set_title('Validation')
            score_ax.legend()
            score_ax.grid(True, alpha=0.3)

            plt.tight_layout()
            return self._finish(fig, path)

        except Exception as e:
            logger.error(f"Error plotting training history: {str(e)}")
            return self._create_placeholder_plot(f"Error: {str(e)}", path)

    def plot_confusion(self, metrics, path: Optional[str] = None) -> str:
        """Per-endcap 2x2 confusion counts as a row of heatmaps"""
        try:
            fig, axes = plt.subplots(1, len(metrics.confusion), figsize=(3 * len(metrics.confusion), 3.2))
            for endcap, (ax, (tn, fp, fn, tp)) in enumerate(zip(np.atleast_1d(axes), metrics.confusion)):
                counts = np.array([[tn, fp], [fn, tp]])
                sns.heatmap(counts, annot=True, fmt='d', cbar=False, cmap='Blues', ax=ax,
                            xticklabels=['0', '1'], yticklabels=['0', '1'])
                ax.set_title(f'endcap {endcap}  F1={metrics.f1[endcap]:.2f}', fontsize=10)
                ax.set_xlabel('predicted')
                ax.set_ylabel('true' if endcap == 0 else '')

            fig.suptitle(f'accuracy {metrics.exact_match_accuracy:.3f}, macro F1 {metrics.macro_f1:.3f}')
            plt.tight_layout()
            return self._finish(fig, path)

        except Exception as e:
            logger.error(f"Error plotting confusion counts: {str(e)}")
            return self._create_placeholder_plot(f"Error: {str(e)}", path)

    def plot_trajectory(self, estimate: np.ndarray, ground_truth: Optional[np.ndarray] = None,
                        path: Optional[str] = None, title: str = 'Estimated trajectory') -> str:
        """Top-down x/y path of the estimate, with ground truth when available"""
        try:
            if len(estimate) == 0:
                return self._create_placeholder_plot("Empty trajectory", path)

            fig, ax = plt.subplots(figsize=(8, 8))
            if ground_truth is not None:
                ax.plot(ground_truth[:, 0], ground_truth[:, 1], color='black', linewidth=2, label='ground truth')
            ax.plot(estimate[:, 0], estimate[:, 1], linestyle='--', linewidth=2, label='InEKF estimate')
            ax.scatter([estimate[0, 0]], [estimate[0, 1]], marker='o', s=60, color='green', zorder=3, label='start')
            ax.set_xlabel('x (m)')
            ax.set_ylabel('y (m)')
            ax.set_aspect('equal', adjustable='datalim')
            ax.set_title(title)
            ax.legend()
            ax.grid(True, alpha=0.3)

            plt.tight_layout()
            return self._finish(fig, path)

        except Exception as e:
            logger.error(f"Error plotting trajectory: {str(e)}")
            return self._create_placeholder_plot(f"Error: {str(e)}", path)

    def plot_graph(self, graph: nx.MultiDiGraph, path: Optional[str] = None) -> str:
        """Draw the typed rod/tendon/endcap graph"""
        try:
            fig, ax = plt.subplots(figsize=(10, 8))
            pos = nx.spring_layout(graph, seed=42, k=2, iterations=50)
            colors = [NODE_COLORS[data['node_type']] for _, data in graph.nodes(data=True)]
            labels = {node: f"{node[0][0]}{node[1]}" for node in graph.nodes}

            nx.draw_networkx_nodes(graph, pos, node_color=colors, node_size=600, alpha=0.9, ax=ax)
            nx.draw_networkx_edges(graph, pos, edge_color='gray', width=1.5, alpha=0.6, ax=ax,
                                   arrows=True, connectionstyle='arc3,rad=0.1')
            nx.draw_networkx_labels(graph, pos, labels=labels, font_size=10, font_weight='bold', ax=ax)
            ax.set_title('Heterogeneous tensegrity graph', fontsize=16, fontweight='bold')
            ax.axis('off')

            plt.tight_layout()
            return self._finish(fig, path)

        except Exception as e:
            logger.error(f"Error drawing graph: {str(e)}")
            return self._create_placeholder_plot(f"Error: {str(e)}", path)

    def _finish(self, fig, path: Optional[str]) -> str:
        """Save to path (returning the path) or return a base64 data URI"""
        if path:
            fig.savefig(path, format='png', bbox_inches='tight', facecolor='white', edgecolor='none')
            plt.close(fig)
            logger.info(f"Wrote figure {path}")
            return path
        data_uri = self._fig_to_base64(fig)
        plt.close(fig)
        return data_uri

    def _fig_to_base64(self, fig) -> str:
        try:
            buffer = io.BytesIO()
            fig.savefig(buffer, format='png', bbox_inches='tight', facecolor='white', edgecolor='none')
            img_data = base64.b64encode(buffer.getvalue()).decode()
            buffer.close()
            logger.info(f"Generated plot: {len(img_data) / 1024:.1f}KB")
            return f"data:image/png;base64,{img_data}"

        except Exception as e:
            logger.error(f"Error converting figure to base64: {str(e)}")
            return BLANK_PNG

    def _create_placeholder_plot(self, message: str, path: Optional[str] = None) -> str:
        """Create a placeholder plot with error message"""
        try:
            fig, ax = plt.subplots(figsize=(8, 6))
            ax.text(0.5, 0.5, message, ha='center', va='center',
                    transform=ax.transAxes, fontsize=14, wrap=True)
            ax.set_title('Plot Generation Error')
            ax.axis('off')
            return self._finish(fig, path)

        except Exception as e:
            logger.error(f"Error creating placeholder plot: {str(e)}")
            return BLANK_PNG
