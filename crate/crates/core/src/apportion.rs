//! Integer apportionment by the largest-remainder method.

/// Rounds real `quotas` to integers summing to `total`, never exceeding
/// `caps`. Floors first, then hands the remaining units to the largest
/// fractional parts, ties going to the lower index. Returns `None` when
/// the caps cannot hold `total`.
pub fn largest_remainder(quotas: &[f64], total: usize, caps: &[usize]) -> Option<Vec<usize>> {
    debug_assert_eq!(quotas.len(), caps.len());
    if caps.iter().sum::<usize>() < total {
        return None;
    }
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(caps)
        .map(|(&q, &cap)| (q.max(0.0).floor() as usize).min(cap))
        .collect();
    let assigned: usize = counts.iter().sum();
    if assigned > total {
        // Floors overshoot only when quotas sum above `total`; trim from the
        // smallest fractional parts.
        let mut order: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
        order.sort_by(|&a, &b| frac(quotas[a]).total_cmp(&frac(quotas[b])).then(b.cmp(&a)));
        let mut excess = assigned - total;
        while excess > 0 {
            for &i in &order {
                if excess == 0 {
                    break;
                }
                if counts[i] > 0 {
                    counts[i] -= 1;
                    excess -= 1;
                }
            }
        }
        return Some(counts);
    }
    let mut remaining = total - assigned;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| frac(quotas[b]).total_cmp(&frac(quotas[a])).then(a.cmp(&b)));
    while remaining > 0 {
        let mut progressed = false;
        for &i in &order {
            if remaining == 0 {
                break;
            }
            if counts[i] < caps[i] {
                counts[i] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return None;
        }
    }
    Some(counts)
}

fn frac(q: f64) -> f64 {
    let q = q.max(0.0);
    q - q.floor()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_exact_total() {
        assert_eq!(
            largest_remainder(&[1.5, 1.5, 1.0], 4, &[10, 10, 10]).unwrap(),
            vec![2, 1, 1]
        );
        assert_eq!(largest_remainder(&[12.8], 13, &[1280]).unwrap(), vec![13]);
        assert_eq!(
            largest_remainder(&[0.4, 0.4, 0.2], 1, &[5, 5, 5]).unwrap(),
            vec![1, 0, 0]
        );
    }

    #[test]
    fn respects_caps() {
        assert_eq!(largest_remainder(&[2.9, 0.1], 3, &[2, 5]).unwrap(), vec![2, 1]);
        assert!(largest_remainder(&[1.0, 1.0], 5, &[2, 2]).is_none());
    }

    #[test]
    fn trims_overshoot() {
        assert_eq!(largest_remainder(&[2.2, 2.7], 3, &[5, 5]).unwrap(), vec![1, 2]);
    }
}
