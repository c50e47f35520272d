'''
========================================================================
        ╦  ╔═╗  ╔═╗┌─┐┌─┐┬ ┬┌─┐  ╔═╗┌─┐┬ ┬
        ║   ═╣  ║  ├─┤│  ├─┤├┤   ╚═╗├─┘└┬┘
        ╩═╝╚═╝  ╚═╝┴ ┴└─┘┴ ┴└─┘  ╚═╝┴   ┴
========================================================================
# Author: L3 Cache Spy Developers
# Permissions and Citation: Refer to the README file.
'''

# Import necessary libraries for the job runner.
import logging
from concurrent.futures import ProcessPoolExecutor
from tqdm import tqdm

# Use module logger so messages go through Python's logging system.
logger = logging.getLogger(__name__)


class JobRunner(object):
  def __init__(self, func, maxJobs=1, description="Jobs", showProgress=True):
    r'''
    Initialize the JobRunner with a worker function.

    Parameters:
      func (callable): Module-level worker function; with maxJobs > 1 it and its jobs must be picklable.
      maxJobs (int): Worker processes; 1 runs inline.
      description (str): Progress-bar label.
      showProgress (bool): Show a tqdm bar.
    '''
    self.func = func  # Worker applied to every job.
    self.maxJobs = max(1, int(maxJobs))  # Never fewer than one worker.
    self.description = description  # Label for the progress bar and the log.
    self.showProgress = showProgress  # Whether to draw the progress bar.

  def Run(self, jobs):
    r'''
    Run the worker on every job and return the results in submission order.

    Result order never depends on maxJobs, so outputs built from it are identical across --jobs.
    The first failing job re-raises its exception.
    '''
    jobs = list(jobs)  # Materialize so the jobs can be counted.
    results = [None] * len(jobs)  # One slot per job, in submission order.
    progress = tqdm(total=len(jobs), desc=self.description, disable=(not self.showProgress), leave=False)
    try:
      if (self.maxJobs <= 1 or len(jobs) <= 1):
        # Inline run: no pool start-up cost.
        for jobId, job in enumerate(jobs):
          results[jobId] = self.func(job)
          progress.update(1)
      else:
        with ProcessPoolExecutor(max_workers=self.maxJobs) as executor:
          # Submit everything, then collect in submission order.
          futures = [executor.submit(self.func, job) for job in jobs]
          for jobId, future in enumerate(futures):
            results[jobId] = future.result()
            progress.update(1)
    finally:
      progress.close()  # Always release the progress bar.

    logger.debug(f"{self.description}: {len(jobs)} jobs completed with {self.maxJobs} worker(s).")
    return results
