"""Visualization Components for Surrogate Reliability Runs"""

import plotly.graph_objects as go
import pandas as pd
from typing import Dict, Optional


# Cyberpunk color scheme
COLORS = {
    'cyan': '#00FFFF',
    'lime': '#32CD32',
    'magenta': '#FF00FF',
    'yellow': '#FFFF00',
    'orange': '#FF8C00',
    'bg_dark': '#0A0E1A',
    'bg_card': '#1A1F35',
    'text': '#E0E0E0',
    'grid': '#2A2F45'
}

BAND_FILL = 'rgba(0, 255, 255, 0.15)'


def create_plotly_theme() -> Dict:
    """Create custom Plotly theme for cyberpunk aesthetics"""
    return {
        'layout': {
            'paper_bgcolor': COLORS['bg_dark'],
            'plot_bgcolor': COLORS['bg_card'],
            'font': {'color': COLORS['text'], 'family': 'Inter, sans-serif'},
            'xaxis': {
                'gridcolor': COLORS['grid'],
                'zerolinecolor': COLORS['grid']
            },
            'yaxis': {
                'gridcolor': COLORS['grid'],
                'zerolinecolor': COLORS['grid']
            }
        }
    }


def _finish_layout(fig: go.Figure, title: str, xaxis_title: str, yaxis_title: str,
                   height: int = 400) -> go.Figure:
    fig.update_layout(
        title=dict(text=title, font=dict(size=20, color=COLORS['text'])),
        xaxis_title=xaxis_title,
        yaxis_title=yaxis_title,
        **create_plotly_theme()['layout'],
        hovermode='x unified',
        height=height,
        legend=dict(
            font=dict(color='#FFFFFF', size=12),
            bgcolor='rgba(26, 31, 53, 0.95)',
            bordercolor='#FFFFFF',
            borderwidth=1
        )
    )
    return fig


def create_band_chart(prediction_df: pd.DataFrame, title: str) -> go.Figure:
    """
    Truth vs predictive mean with the calibrated interval

    Args:
        prediction_df: DataFrame with columns: t, truth, mu_hat and optionally lower, upper
        title: Chart title

    Returns:
        Plotly figure
    """
    df = prediction_df
    fig = go.Figure()

    if {'lower', 'upper'} <= set(df.columns):
        fig.add_trace(go.Scatter(
            x=pd.concat([df['t'], df['t'][::-1]]),
            y=pd.concat([df['upper'], df['lower'][::-1]]),
            fill='toself',
            fillcolor=BAND_FILL,
            line=dict(width=0),
            name='Calibrated interval',
            hoverinfo='skip'
        ))

    fig.add_trace(go.Scatter(
        x=df['t'], y=df['truth'],
        mode='lines',
        name='Truth',
        line=dict(color=COLORS['lime'], width=2)
    ))
    fig.add_trace(go.Scatter(
        x=df['t'], y=df['mu_hat'],
        mode='lines',
        name='Predictive mean',
        line=dict(color=COLORS['cyan'], width=2, dash='dash')
    ))
    return _finish_layout(fig, title, 'Time (s)', 'Displacement (m)')


def create_coverage_chart(coverage_df: pd.DataFrame, target: float = 95.0) -> go.Figure:
    """
    Per-timestep coverage of raw and calibrated intervals

    Args:
        coverage_df: DataFrame with columns: t, coverage_calibrated_pct, coverage_raw_pct
        target: Nominal coverage in percent

    Returns:
        Plotly figure
    """
    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=coverage_df['t'], y=coverage_df['coverage_calibrated_pct'],
        mode='lines+markers',
        name='Calibrated',
        line=dict(color=COLORS['cyan'], width=2),
        marker=dict(size=5, color=COLORS['lime'])
    ))
    if 'coverage_raw_pct' in coverage_df.columns:
        fig.add_trace(go.Scatter(
            x=coverage_df['t'], y=coverage_df['coverage_raw_pct'],
            mode='lines',
            name='Uncalibrated',
            line=dict(color=COLORS['magenta'], width=2)
        ))
    fig.add_hline(y=target, line=dict(color=COLORS['yellow'], width=2, dash='dash'),
                  annotation_text=f"{target:g}%")
    return _finish_layout(fig, 'Coverage per time step', 'Time (s)', 'Coverage (%)')


def create_pof_chart(curve_df: pd.DataFrame, title: str) -> go.Figure:
    """
    Probability of failure over time: surrogate mean, bounds and Monte Carlo truth

    Args:
        curve_df: DataFrame with columns: t, pf_mean, pf_lower, pf_upper and optionally pf_true
        title: Chart title

    Returns:
        Plotly figure
    """
    df = curve_df
    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=pd.concat([df['t'], df['t'][::-1]]),
        y=pd.concat([df['pf_upper'], df['pf_lower'][::-1]]),
        fill='toself',
        fillcolor=BAND_FILL,
        line=dict(width=0, shape='hv'),
        name='Calibrated bounds',
        hoverinfo='skip'
    ))
    fig.add_trace(go.Scatter(
        x=df['t'], y=df['pf_mean'],
        mode='lines',
        name='Surrogate mean',
        line=dict(color=COLORS['cyan'], width=2, shape='hv')
    ))
    if 'pf_true' in df.columns:
        fig.add_trace(go.Scatter(
            x=df['t'], y=df['pf_true'],
            mode='lines',
            name='Monte Carlo',
            line=dict(color=COLORS['lime'], width=2, dash='dot', shape='hv')
        ))
    fig.update_yaxes(range=[0, 1])
    return _finish_layout(fig, title, 'Time (s)', 'P_f(t)')


def create_energy_ratio_chart(curves: Dict[str, pd.DataFrame]) -> go.Figure:
    """
    E_ANN / E_VSN against input spiking activity, one line per setting

    Args:
        curves: Label -> DataFrame with columns: alpha, ratio

    Returns:
        Plotly figure
    """
    palette = [COLORS['cyan'], COLORS['magenta'], COLORS['lime'], COLORS['orange']]
    fig = go.Figure()
    for i, (label, df) in enumerate(curves.items()):
        fig.add_trace(go.Scatter(
            x=100.0 * df['alpha'], y=df['ratio'],
            mode='lines',
            name=label,
            line=dict(color=palette[i % len(palette)], width=3)
        ))
    fig.add_hline(y=1.0, line=dict(color=COLORS['yellow'], width=2, dash='dash'),
                  annotation_text='parity')
    fig.update_yaxes(type='log')
    return _finish_layout(fig, 'ANN / VSN energy ratio', 'Input spiking activity (%)', 'E_ANN / E_VSN')


def create_training_chart(log_df: pd.DataFrame, title: Optional[str] = None) -> go.Figure:
    """
    Negative ELBO per iteration and the best-so-far value

    Args:
        log_df: DataFrame with columns: iteration, loss, best and
            optionally mean_loss

    Returns:
        Plotly figure
    """
    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=log_df['iteration'], y=log_df['loss'],
        mode='lines',
        name='Loss',
        line=dict(color=COLORS['magenta'], width=1)
    ))
    if 'mean_loss' in log_df:
        fig.add_trace(go.Scatter(
            x=log_df['iteration'], y=log_df['mean_loss'],
            mode='lines',
            name='Posterior mean',
            line=dict(color=COLORS['yellow'], width=1)
        ))
    fig.add_trace(go.Scatter(
        x=log_df['iteration'], y=log_df['best'],
        mode='lines',
        name='Best',
        line=dict(color=COLORS['cyan'], width=3)
    ))
    return _finish_layout(fig, title or 'Training loss', 'Iteration', 'Negative ELBO')
