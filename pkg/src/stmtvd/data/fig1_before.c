static void timer_rearm_overrun(struct k_itimer *timr, ktime_t interval)
{
	struct hrtimer *timer = timr_to_hrtimer(timr);
	ktime_t now;

	/* one-shot timers are never rearmed */
	if (!interval)
		return;

	spin_lock(&timr->it_lock);
	timr->it_requeue_pending++;

	/*
	 * Push the expiry forward by whole intervals so the timer fires
	 * at the next period boundary, and remember how many periods
	 * were skipped so the owner can be told about missed expiries.
	 */

	now = timer->base->get_time();
	timr->it_active = 1;
	if (timer->interval != 0) {
		timer->it_overrun += (int)hrtimer_forward(timer, now, timer->interval);
	}
	hrtimer_restart(timer);
	spin_unlock(&timr->it_lock);
}
