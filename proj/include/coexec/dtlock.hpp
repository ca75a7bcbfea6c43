#pragma once

#include <atomic>
#include <cstdint>

#include <sys/types.h>

#include "coexec/shm_types.hpp"
#include "coexec/sys.hpp"

namespace coexec {

struct DelegationRequest {
	std::uint64_t words[3] = {0, 0, 0};
};

// Ticket lock living in shared memory whose holder serves queued requests
// on behalf of their waiters (delegation). Waiters take a ticket and post
// their request into the slot for that ticket; on release the holder walks
// the ticket sequence, answering every posted delegated request and passing
// the lock itself to the first waiter that needs exclusive access (or to
// whichever ticket is taken next).
//
// Slot status word: (ticket << 2) | state. A slot serves tickets t, t+N,
// t+2N, ... and is handed to the next ticket once its waiter is done.
class DelegationTicketLock {
public:
	static constexpr std::uint32_t kSlots = 512;

	enum State : std::uint64_t {
		Empty = 0,
		Posted = 1,
		Served = 2,
		Owner = 3,
	};

	enum class Kind : std::uint32_t {
		Exclusive = 0,
		Delegate = 1,
	};

	struct alignas(kCacheLine) Slot {
		std::atomic<std::uint64_t> status;
		std::atomic<std::uint32_t> sleeping;
		Kind kind;
		std::atomic<pid_t> taker;
		DelegationRequest request;
		std::uint64_t response;
	};

	struct Stats {
		std::uint64_t delegated = 0;
		std::uint64_t exclusive = 0;
		std::uint64_t recoveries = 0;
	};

	// Zeroed memory is not a valid lock; call once at segment creation.
	void initialize() noexcept;

	// `Server` is invoked as `std::uint64_t server(std::uint64_t ticket,
	// const DelegationRequest &)` by whichever thread holds the lock.
	template <typename Server>
	void lock(Server &server);

	template <typename Server>
	void unlock(Server &server);

	// Returns the response computed for `request`, either by this thread
	// (when it obtained the lock) or by the holder on its behalf.
	template <typename Server>
	std::uint64_t delegate(const DelegationRequest &request, Server &server);

	// Ticket held by the current owner (meaningful only inside the
	// critical section).
	std::uint64_t holder_ticket() const noexcept
	{
		return _holder_ticket.load(std::memory_order_relaxed);
	}

	Stats stats() const noexcept
	{
		return Stats{_delegated.load(std::memory_order_relaxed), _exclusive.load(std::memory_order_relaxed),
			_recoveries.load(std::memory_order_relaxed)};
	}

private:
	static constexpr std::uint64_t pack(std::uint64_t ticket, State st) noexcept
	{
		return (ticket << 2) | st;
	}
	static constexpr std::uint64_t ticket_of(std::uint64_t status) noexcept
	{
		return status >> 2;
	}

	Slot &slot_for(std::uint64_t ticket) noexcept
	{
		return _slots[ticket % kSlots];
	}

	// Returns Served or Owner.
	template <typename Server>
	State acquire(Kind kind, const DelegationRequest &request, std::uint64_t &ticket, Server &server);

	template <typename Server>
	void pass_from(std::uint64_t next, Server &server);

	void wait_slot_available(std::uint64_t ticket) noexcept;
	void become_owner(std::uint64_t ticket) noexcept;
	void signal(Slot &slot, std::uint64_t status) noexcept;

	template <typename Server>
	void try_recover(Server &server, std::uint64_t &stall_since, std::uint64_t &seen_cursor);

	alignas(kCacheLine) std::atomic<std::uint64_t> _next_ticket;
	alignas(kCacheLine) std::atomic<std::uint64_t> _holder_ticket;
	std::atomic<std::uint64_t> _cursor;
	std::atomic<pid_t> _holder_pid;
	std::atomic<pid_t> _recovering;
	std::atomic<std::uint64_t> _delegated;
	std::atomic<std::uint64_t> _exclusive;
	std::atomic<std::uint64_t> _recoveries;
	Slot _slots[kSlots];
};

// ---------------------------------------------------------------------------

inline void DelegationTicketLock::initialize() noexcept
{
	_next_ticket.store(0);
	_holder_ticket.store(0);
	_cursor.store(0);
	_holder_pid.store(0);
	_recovering.store(0);
	_delegated.store(0);
	_exclusive.store(0);
	_recoveries.store(0);
	for (std::uint32_t i = 0; i < kSlots; ++i) {
		_slots[i].status.store(pack(i, Empty));
		_slots[i].sleeping.store(0);
		_slots[i].taker.store(0);
		_slots[i].response = 0;
	}
	// Nobody holds the lock: the first ticket owns it on arrival.
	_slots[0].status.store(pack(0, Owner));
}

inline void DelegationTicketLock::signal(Slot &slot, std::uint64_t status) noexcept
{
	slot.status.store(status, std::memory_order_seq_cst);
	if (slot.sleeping.exchange(0, std::memory_order_seq_cst) != 0)
		sys::futex_wake(slot.sleeping);
}

inline void DelegationTicketLock::wait_slot_available(std::uint64_t ticket) noexcept
{
	Slot &s = slot_for(ticket);
	sys::Backoff backoff;
	std::uint64_t start = 0;
	while (true) {
		std::uint64_t st = s.status.load(std::memory_order_acquire);
		if (ticket_of(st) >= ticket)
			return;
		backoff.pause();
		// The previous user of this slot (ticket - kSlots) has not picked
		// up its answer. If it died, nobody ever will.
		if (start == 0) {
			start = sys::now_ns();
		} else if (sys::now_ns() - start > kWatchdogNs) {
			pid_t taker = s.taker.load(std::memory_order_relaxed);
			if ((st & 3) == Served && !sys::process_alive(taker)) {
				if (s.status.compare_exchange_strong(st, pack(ticket_of(st) + kSlots, Empty)))
					_recoveries.fetch_add(1, std::memory_order_relaxed);
			}
			start = sys::now_ns();
		}
	}
}

inline void DelegationTicketLock::become_owner(std::uint64_t ticket) noexcept
{
	_holder_pid.store(sys::current_pid(), std::memory_order_relaxed);
	_holder_ticket.store(ticket, std::memory_order_relaxed);
	_cursor.store(ticket + 1, std::memory_order_relaxed);
}

template <typename Server>
DelegationTicketLock::State DelegationTicketLock::acquire(Kind kind, const DelegationRequest &request,
	std::uint64_t &ticket, Server &server)
{
	ticket = _next_ticket.fetch_add(1, std::memory_order_acq_rel);
	Slot &s = slot_for(ticket);
	wait_slot_available(ticket);
	s.taker.store(sys::current_pid(), std::memory_order_relaxed);
	s.kind = kind;
	s.request = request;

	std::uint64_t expected = pack(ticket, Empty);
	if (!s.status.compare_exchange_strong(expected, pack(ticket, Posted), std::memory_order_acq_rel)) {
		// Pre-marked: the lock was free when the previous holder left.
		become_owner(ticket);
		return Owner;
	}

	const std::uint64_t served = pack(ticket, Served);
	const std::uint64_t owner = pack(ticket, Owner);
	for (int i = 0; i < 64; ++i) {
		std::uint64_t st = s.status.load(std::memory_order_acquire);
		if (st == served)
			return Served;
		if (st == owner) {
			become_owner(ticket);
			return Owner;
		}
		sys::cpu_relax();
	}

	std::uint64_t stall_since = 0;
	std::uint64_t seen_cursor = ~0ull;
	while (true) {
		s.sleeping.store(1, std::memory_order_seq_cst);
		std::uint64_t st = s.status.load(std::memory_order_seq_cst);
		if (st == served) {
			s.sleeping.store(0, std::memory_order_relaxed);
			return Served;
		}
		if (st == owner) {
			s.sleeping.store(0, std::memory_order_relaxed);
			become_owner(ticket);
			return Owner;
		}
		sys::futex_wait(s.sleeping, 1, 100'000'000ull);
		try_recover(server, stall_since, seen_cursor);
	}
}

template <typename Server>
void DelegationTicketLock::try_recover(Server &server, std::uint64_t &stall_since, std::uint64_t &seen_cursor)
{
	std::uint64_t cursor = _cursor.load(std::memory_order_relaxed);
	std::uint64_t now = sys::now_ns();
	if (cursor != seen_cursor || stall_since == 0) {
		seen_cursor = cursor;
		stall_since = now;
		return;
	}
	if (now - stall_since < kWatchdogNs)
		return;
	stall_since = now;

	pid_t holder = _holder_pid.load(std::memory_order_relaxed);
	if (holder == 0 || sys::process_alive(holder))
		return;
	pid_t none = 0;
	if (!_recovering.compare_exchange_strong(none, sys::current_pid()))
		return;
	// Re-check under the recovery flag: another waiter may have finished
	// a recovery in the meantime.
	if (_holder_pid.load() == holder && _cursor.load() == cursor) {
		std::uint64_t held = _holder_ticket.load(std::memory_order_relaxed);
		Slot &hs = slot_for(held);
		std::uint64_t st = pack(held, Owner);
		hs.status.compare_exchange_strong(st, pack(held + kSlots, Empty));
		_holder_pid.store(0, std::memory_order_relaxed);
		_recoveries.fetch_add(1, std::memory_order_relaxed);
		pass_from(cursor, server);
	}
	_recovering.store(0);
}

template <typename Server>
void DelegationTicketLock::pass_from(std::uint64_t next, Server &server)
{
	const std::uint64_t limit = next + kSlots;
	while (true) {
		_cursor.store(next, std::memory_order_relaxed);
		Slot &s = slot_for(next);
		wait_slot_available(next);
		std::uint64_t st = s.status.load(std::memory_order_acquire);

		if (ticket_of(st) > next || st == pack(next, Served)) {
			// Already answered (only seen while recovering from a dead holder).
			++next;
			continue;
		}
		if (st == pack(next, Owner))
			return;

		if (st == pack(next, Empty)) {
			// Nobody has posted for this ticket yet: whoever takes it owns the lock.
			if (s.status.compare_exchange_strong(st, pack(next, Owner), std::memory_order_acq_rel))
				return;
			// Lost the race against the poster; st is now Posted.
		}

		if (s.kind == Kind::Delegate && next < limit) {
			s.response = server(next, s.request);
			_delegated.fetch_add(1, std::memory_order_relaxed);
			signal(s, pack(next, Served));
			++next;
			continue;
		}
		signal(s, pack(next, Owner));
		return;
	}
}

template <typename Server>
void DelegationTicketLock::lock(Server &server)
{
	std::uint64_t ticket;
	acquire(Kind::Exclusive, DelegationRequest{}, ticket, server);
	_exclusive.fetch_add(1, std::memory_order_relaxed);
}

template <typename Server>
void DelegationTicketLock::unlock(Server &server)
{
	std::uint64_t ticket = _holder_ticket.load(std::memory_order_relaxed);
	Slot &s = slot_for(ticket);
	s.status.store(pack(ticket + kSlots, Empty), std::memory_order_release);
	pass_from(ticket + 1, server);
}

template <typename Server>
std::uint64_t DelegationTicketLock::delegate(const DelegationRequest &request, Server &server)
{
	std::uint64_t ticket;
	if (acquire(Kind::Delegate, request, ticket, server) == Served) {
		Slot &s = slot_for(ticket);
		std::uint64_t response = s.response;
		s.status.store(pack(ticket + kSlots, Empty), std::memory_order_release);
		return response;
	}
	std::uint64_t response = server(ticket, request);
	unlock(server);
	return response;
}

} // namespace coexec
